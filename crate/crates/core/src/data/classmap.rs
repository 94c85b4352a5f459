//! Remapping between label sets, e.g. a simulator's classes onto the classes
//! shared with a real benchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// Class layout of the 14-class driving simulator ground truth.
pub const VKITTI_CLASSES: [&str; 14] = [
    "terrain",
    "sky",
    "tree",
    "vegetation",
    "building",
    "road",
    "guard_rail",
    "traffic_sign",
    "traffic_light",
    "pole",
    "misc",
    "truck",
    "car",
    "van",
];

/// The twelve classes present in both the simulator and the real benchmark.
pub const COMMON_CLASSES: [&str; 12] = [
    "terrain",
    "sky",
    "vegetation",
    "building",
    "road",
    "guard_rail",
    "traffic_sign",
    "traffic_light",
    "pole",
    "truck",
    "car",
    "van",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Target index per source index; `None` sends the class to `ignore`.
    pub map: Vec<Option<u8>>,
    /// Label written for unmapped classes. Without it an unmapped class is an
    /// error.
    pub ignore: Option<u8>,
}

impl ClassMap {
    pub fn identity<S: AsRef<str>>(names: &[S]) -> Self {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        Self {
            map: (0..names.len()).map(|i| Some(i as u8)).collect(),
            source: names.clone(),
            target: names,
            ignore: Some(IGNORE),
        }
    }

    /// Maps each source class to the target class of the same name; the rest
    /// go to `IGNORE`.
    pub fn by_name<S: AsRef<str>, U: AsRef<str>>(source: &[S], target: &[U]) -> Result<Self> {
        let target: Vec<String> = target.iter().map(|s| s.as_ref().to_string()).collect();
        let cm = Self {
            map: source
                .iter()
                .map(|s| target.iter().position(|t| t == s.as_ref()).map(|i| i as u8))
                .collect(),
            source: source.iter().map(|s| s.as_ref().to_string()).collect(),
            target,
            ignore: Some(IGNORE),
        };
        cm.validate()?;
        Ok(cm)
    }

    /// Simulator classes onto the twelve common ones; `tree` and `misc` have
    /// no counterpart and are ignored.
    pub fn vkitti_to_common() -> Self {
        Self::by_name(&VKITTI_CLASSES, &COMMON_CLASSES).expect("static class tables")
    }

    pub fn validate(&self) -> Result<()> {
        if self.map.len() != self.source.len() {
            return Err(Error::Usage(format!(
                "class map has {} entries for {} source classes",
                self.map.len(),
                self.source.len()
            )));
        }
        if self.target.len() > IGNORE as usize {
            return Err(Error::Usage("at most 255 target classes".into()));
        }
        let mut used = vec![false; self.target.len()];
        for t in self.map.iter().flatten() {
            let slot = used.get_mut(*t as usize).ok_or_else(|| {
                Error::Usage(format!("target index {t} outside {} classes", self.target.len()))
            })?;
            *slot = true;
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Usage(format!(
                "target class `{}` receives no source class",
                self.target[i]
            )));
        }
        Ok(())
    }

    pub fn remap(&self, labels: &LabelMap) -> Result<LabelMap> {
        let mut out = labels.clone();
        for v in out.data_mut() {
            if *v == IGNORE {
                continue;
            }
            let entry = self.map.get(*v as usize).ok_or_else(|| {
                Error::Data(format!("label {v} outside {} source classes", self.source.len()))
            })?;
            *v = match (entry, self.ignore) {
                (Some(t), _) => *t,
                (None, Some(ig)) => ig,
                (None, None) => {
                    return Err(Error::Data(format!(
                        "source class `{}` has no target and no ignore label",
                        self.source[*v as usize]
                    )))
                }
            };
        }
        Ok(out)
    }
}

/// Free-function form of [`ClassMap::remap`].
pub fn remap_classes(labels: &LabelMap, cm: &ClassMap) -> Result<LabelMap> {
    cm.remap(labels)
}
