//! Synthetic paired scenes, dataset storage and batching.

pub mod classmap;
pub mod disk;
pub mod scene;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::Domain;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use classmap::{remap_classes, ClassMap, COMMON_CLASSES, VKITTI_CLASSES};
pub use disk::{load_directory_dataset, save_dataset, write_dataset, DatasetMeta, DirectoryDataset, WriteOptions};
pub use scene::{generate_scene, SceneConfig, ScenePair, SceneSample, ShiftConfig, SCENE_CLASSES};

/// Mixes `parts` into `base` (SplitMix64 finalizer per part), giving
/// independent-looking seeds for sub-streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &p| {
        mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

/// Read access to sim and real samples.
pub trait SceneSource<T: Scalar>: Sync {
    fn len(&self, domain: Domain) -> usize;
    fn sample(&self, domain: Domain, index: usize) -> Result<SceneSample<T>>;
    /// Metric depth range `(d_min, d_max)`.
    fn depth_range(&self) -> (f64, f64);
    fn image_size(&self) -> usize;
}

/// Samples held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryDataset<T> {
    pub sim: Vec<SceneSample<T>>,
    pub real: Vec<SceneSample<T>>,
    pub d_min: f64,
    pub d_max: f64,
}

impl<T: Scalar> MemoryDataset<T> {
    /// `sim_count` sim and `real_count` real samples from disjoint scene seeds.
    pub fn generate(cfg: &SceneConfig, seed: u64, sim_count: usize, real_count: usize) -> Result<Self> {
        let sim = (0..sim_count)
            .map(|i| generate_scene(derive_seed(seed, &[0, i as u64]), cfg).map(|p| p.sim))
            .collect::<Result<_>>()?;
        let real = (0..real_count)
            .map(|i| generate_scene(derive_seed(seed, &[1, i as u64]), cfg).map(|p| p.real))
            .collect::<Result<_>>()?;
        Ok(Self {
            sim,
            real,
            d_min: cfg.d_min,
            d_max: cfg.d_max,
        })
    }

    /// Loads every sample of `src` into memory.
    pub fn collect(src: &dyn SceneSource<T>) -> Result<Self> {
        let all = |d| (0..src.len(d)).map(|i| src.sample(d, i)).collect::<Result<Vec<_>>>();
        let (d_min, d_max) = src.depth_range();
        Ok(Self {
            sim: all(Domain::Sim)?,
            real: all(Domain::Real)?,
            d_min,
            d_max,
        })
    }

    fn split(&self, domain: Domain) -> &[SceneSample<T>] {
        match domain {
            Domain::Sim => &self.sim,
            Domain::Real => &self.real,
        }
    }
}

impl<T: Scalar> SceneSource<T> for MemoryDataset<T> {
    fn len(&self, domain: Domain) -> usize {
        self.split(domain).len()
    }

    fn sample(&self, domain: Domain, index: usize) -> Result<SceneSample<T>> {
        self.split(domain)
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Usage(format!("{domain} index {index} out of range")))
    }

    fn depth_range(&self) -> (f64, f64) {
        (self.d_min, self.d_max)
    }

    fn image_size(&self) -> usize {
        self.sim
            .first()
            .or(self.real.first())
            .map_or(0, |s| s.size())
    }
}

fn check_range(d_min: f64, d_max: f64) -> Result<()> {
    if d_max > d_min && d_min.is_finite() && d_max.is_finite() {
        Ok(())
    } else {
        Err(Error::Usage(format!("depth range needs d_min < d_max, got [{d_min}, {d_max}]")))
    }
}

/// Affine map of `[d_min, d_max]` onto `[−1, 1]`.
pub fn normalize_depth<T: Scalar>(d: &Tensor<T>, d_min: f64, d_max: f64) -> Result<Tensor<T>> {
    check_range(d_min, d_max)?;
    let scale = T::from_f64_lossy(2.0 / (d_max - d_min));
    let lo = T::from_f64_lossy(d_min);
    Ok(d.map(|v| (v - lo) * scale - T::one()))
}

/// Inverse of [`normalize_depth`].
pub fn denormalize_depth<T: Scalar>(d: &Tensor<T>, d_min: f64, d_max: f64) -> Result<Tensor<T>> {
    check_range(d_min, d_max)?;
    let half = T::from_f64_lossy((d_max - d_min) / 2.0);
    let lo = T::from_f64_lossy(d_min);
    Ok(d.map(|v| (v + T::one()) * half + lo))
}

/// A training or evaluation batch of images with optional ground truth.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// (N, 3, H, W).
    pub rgb: Tensor<T>,
    /// (N, 1, H, W), normalized to `[−1, 1]`.
    pub depth: Option<Tensor<T>>,
    /// (N, H, W).
    pub labels: Option<LabelMap>,
}

/// Stacks samples into a batch; depth and labels are kept only when every
/// sample has them.
pub fn collate<T: Scalar>(samples: &[SceneSample<T>], d_min: f64, d_max: f64) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("batch of zero samples".into()));
    }
    // Samples are unbatched (C, H, W); give each a leading unit axis.
    let lift = |t: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(shape)
    };
    let rgbs = samples.iter().map(|s| lift(&s.rgb)).collect::<Result<Vec<_>>>()?;
    let rgb = Tensor::stack(&rgbs.iter().collect::<Vec<_>>())?;
    let depth = if samples.iter().all(|s| s.depth.is_some()) {
        let normed = samples
            .iter()
            .map(|s| lift(&normalize_depth(s.depth.as_ref().expect("checked"), d_min, d_max)?))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::stack(&normed.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let labels = if samples.iter().all(|s| s.labels.is_some()) {
        let maps: Vec<&LabelMap> = samples.iter().map(|s| s.labels.as_ref().expect("checked")).collect();
        Some(LabelMap::stack(&maps)?)
    } else {
        None
    };
    Ok(Batch { rgb, depth, labels })
}
