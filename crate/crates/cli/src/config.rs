//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use latentbridge::loss::{LossOptions, Stage};
use latentbridge::model::{ArchConfig, Group};
use latentbridge::train::{OptimizerConfig, StagePlan, TrainConfig};
use latentbridge::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeName {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub stage: Stage,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    /// Defaults to the stage's standard trainable groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<Group>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DTypeName,
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossOptions,
    #[serde(default)]
    pub stages: Vec<StageEntry>,
}

impl RunConfig {
    pub fn arch(&self) -> Result<ArchConfig> {
        ArchConfig::preset(&self.preset)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            loss: self.loss.clone(),
        }
    }

    pub fn plan(&self, e: &StageEntry) -> StagePlan {
        StagePlan {
            stage: e.stage,
            trainable: e.trainable.clone(),
            epochs: e.epochs,
            batch_size: e.batch_size.unwrap_or(8),
            seed: e.seed.unwrap_or(self.seed),
            steps_per_epoch: e.steps_per_epoch,
        }
    }

    pub fn plans(&self) -> Vec<StagePlan> {
        self.stages.iter().map(|e| self.plan(e)).collect()
    }

    /// The configured plan for `stage`.
    pub fn plan_for(&self, stage: Stage) -> Result<StagePlan> {
        self.stages
            .iter()
            .find(|e| e.stage == stage)
            .map(|e| self.plan(e))
            .ok_or_else(|| Error::Usage(format!("the config has no [[stages]] entry for {stage}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch()?.validate()?;
        self.train_config().validate()?;
        for p in self.plans() {
            p.validate()?;
        }
        Ok(())
    }

    /// Every default made explicit, so the file reruns without the original.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.stages {
            let p = self.plan(e);
            e.batch_size = Some(p.batch_size);
            e.seed = Some(p.seed);
            e.trainable = Some(p.groups());
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("cannot serialize config: {e}")))
    }
}

/// Parses `text` (errors carry line numbers), then applies `overrides` of
/// the form `a.b.c=value`, where `value` is a TOML value or a bare string.
pub fn parse_config(text: &str, origin: &Path, overrides: &[String]) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", origin.display())))?;
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", origin.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Usage(format!("after overrides {overrides:?}: {e}")))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    parse_config(&text, path, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let bad = |why: &str| Error::Usage(format!("override `{spec}`: {why}"));
    let (last, parents) = path.split_last().ok_or_else(|| bad("empty key"))?;
    let mut node = table
        .entry(parents.first().copied().unwrap_or(last).to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if parents.is_empty() {
        *node = parse_value(raw.trim());
        return Ok(());
    }
    for seg in parents[1..].iter().chain(std::iter::once(last)) {
        node = match node {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = seg.parse().map_err(|_| bad("array segments must be indices"))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| bad(&format!("index {i} outside {len} entries")))?
            }
            _ => return Err(bad(&format!("`{seg}` is below a plain value"))),
        };
    }
    *node = parse_value(raw.trim());
    Ok(())
}
