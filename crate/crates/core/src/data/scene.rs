//! Procedural street-like scenes rendered twice: flat-shaded ("sim") and with
//! an appearance shift ("real") over identical geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::Domain;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class names of generated scenes, by label index.
pub const SCENE_CLASSES: [&str; 6] = ["sky", "ground", "building", "vehicle", "pole", "sign"];

const SKY: u8 = 0;
const GROUND: u8 = 1;

/// Flat colors in `[0, 1]`, by class.
const PALETTE: [[f64; 3]; 6] = [
    [0.55, 0.75, 0.95],
    [0.45, 0.42, 0.38],
    [0.70, 0.35, 0.30],
    [0.20, 0.30, 0.75],
    [0.85, 0.85, 0.20],
    [0.90, 0.10, 0.10],
];

const HAZE_COLOR: [f64; 3] = [0.80, 0.80, 0.85];

/// Appearance change applied to the "real" rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Per-class standard deviation of i.i.d. pixel noise, in `[0, 1]` units.
    pub texture_noise: [f64; 6],
    /// Applied to every color as `M · c + offset`.
    pub color_matrix: [[f64; 3]; 3],
    pub color_offset: [f64; 3],
    /// Brightness falls to `1 − vignette` at the image corners.
    pub vignette: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            texture_noise: [0.03, 0.10, 0.08, 0.05, 0.05, 0.05],
            color_matrix: [[0.80, 0.15, 0.05], [0.10, 0.70, 0.20], [0.05, 0.20, 0.75]],
            color_offset: [0.05, -0.05, 0.08],
            vignette: 0.35,
        }
    }
}

impl ShiftConfig {
    /// No appearance change: "real" equals "sim".
    pub fn none() -> Self {
        Self {
            texture_noise: [0.0; 6],
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_offset: [0.0; 3],
            vignette: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    /// Image sides must be multiples of this (the model's total downsampling).
    pub downsample: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub max_objects: usize,
    /// Blend weight toward the haze color at `d_max`; a depth cue in both
    /// renderings.
    pub haze: f64,
    pub shift: ShiftConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            downsample: 16,
            d_min: 1.0,
            d_max: 80.0,
            max_objects: 6,
            haze: 0.6,
            shift: ShiftConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.size == 0 || self.size % self.downsample != 0 {
            let lo = self.size / self.downsample.max(1) * self.downsample;
            let hi = lo + self.downsample;
            return Err(Error::Dimension(format!(
                "image size {} is not a multiple of the total downsampling factor {}; use {} or {}",
                self.size,
                self.downsample,
                lo.max(self.downsample),
                hi
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::Usage(format!(
                "depth range needs 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if !(0.0..=1.0).contains(&self.haze) || !(0.0..=1.0).contains(&self.shift.vignette) {
            return Err(Error::Usage("haze and vignette must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One image with optional ground truth. `rgb` is (3, H, W) in `[−1, 1]`,
/// `depth` is (1, H, W) in meters and `labels` is (1, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample<T> {
    pub rgb: Tensor<T>,
    pub depth: Option<Tensor<T>>,
    pub labels: Option<LabelMap>,
    pub domain: Domain,
}

impl<T: Scalar> SceneSample<T> {
    pub fn size(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn require_depth(&self) -> Result<&Tensor<T>> {
        self.depth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} sample has no depth ground truth", self.domain)))
    }

    pub fn require_labels(&self) -> Result<&LabelMap> {
        self.labels.as_ref().ok_or_else(|| {
            Error::Data(format!("{} sample has no segmentation ground truth", self.domain))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair<T> {
    pub sim: SceneSample<T>,
    pub real: SceneSample<T>,
}

struct Geometry {
    size: usize,
    depth: Vec<f64>,
    labels: Vec<u8>,
}

enum Shape {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, x1, y0, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

fn layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Geometry {
    let n = cfg.size;
    let s = n as f64;
    let horizon = (s * rng.random_range(0.3..0.5)).floor() as usize;
    let below = (n - horizon) as f64;
    // Flat ground seen from a fixed camera: depth ∝ 1 / rows below horizon.
    let ground_depth =
        |y: usize| (cfg.d_min * below / (y - horizon + 1) as f64).clamp(cfg.d_min, cfg.d_max);

    let mut depth = vec![cfg.d_max; n * n];
    let mut labels = vec![SKY; n * n];
    for y in horizon..n {
        for x in 0..n {
            depth[y * n + x] = ground_depth(y);
            labels[y * n + x] = GROUND;
        }
    }

    let count = rng.random_range(1..=cfg.max_objects.max(1));
    let mut objects: Vec<(f64, u8, Shape)> = (0..count)
        .map(|_| {
            let class = rng.random_range(2..SCENE_CLASSES.len() as u8);
            let base = rng.random_range(horizon + 1..n.max(horizon + 2)).min(n - 1);
            // Apparent size grows with distance below the horizon.
            let scale = (base - horizon + 1) as f64;
            let cx = rng.random_range(0.0..s);
            let yb = base as f64 + 1.0;
            let rect = |w: f64, h: f64| Shape::Rect {
                x0: cx - w / 2.0,
                x1: cx + w / 2.0,
                y0: yb - h,
                y1: yb,
            };
            let shape = match class {
                2 => rect(scale * rng.random_range(1.5..3.0), scale * rng.random_range(1.5..2.5)),
                3 => rect(scale * 1.2, scale * 0.6),
                4 => rect((scale * 0.12).max(1.0), scale * 2.0),
                _ => Shape::Disc {
                    cx,
                    cy: yb - scale * 0.8,
                    r: (scale * 0.35).max(0.75),
                },
            };
            (ground_depth(base), class, shape)
        })
        .collect();
    // Painter's order: far objects first.
    objects.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (d, class, shape) in &objects {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    depth[y * n + x] = *d;
                    labels[y * n + x] = *class;
                }
            }
        }
    }
    Geometry {
        size: n,
        depth,
        labels,
    }
}

/// Flat class color blended toward haze with distance, in `[0, 1]`.
fn base_color(cfg: &SceneConfig, class: u8, depth: f64) -> [f64; 3] {
    let a = cfg.haze * (depth - cfg.d_min) / (cfg.d_max - cfg.d_min);
    let c = PALETTE[class as usize];
    [0, 1, 2].map(|k| c[k] * (1.0 - a) + HAZE_COLOR[k] * a)
}

fn render<T: Scalar>(cfg: &SceneConfig, geo: &Geometry, shift: Option<&mut ChaCha8Rng>) -> Tensor<T> {
    let n = geo.size;
    let plane = n * n;
    let mut out = vec![0.0f64; 3 * plane];
    let mut noise_rng = shift;
    let half = (n as f64 - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let class = geo.labels[i];
            let mut c = base_color(cfg, class, geo.depth[i]);
            if let Some(rng) = noise_rng.as_deref_mut() {
                let sh = &cfg.shift;
                let m = sh.color_matrix;
                let mixed = [0, 1, 2].map(|k| {
                    m[k][0] * c[0] + m[k][1] * c[1] + m[k][2] * c[2] + sh.color_offset[k]
                });
                let r2 = ((x as f64 - half).powi(2) + (y as f64 - half).powi(2)) / (2.0 * half * half).max(1e-12);
                let gain = 1.0 - sh.vignette * r2;
                let std = sh.texture_noise[class as usize];
                c = mixed.map(|v| {
                    let e: f64 = rng.sample(StandardNormal);
                    (v + std * e) * gain
                });
            }
            for k in 0..3 {
                out[k * plane + i] = 2.0 * c[k].clamp(0.0, 1.0) - 1.0;
            }
        }
    }
    Tensor::from_f64(vec![3, n, n], &out).expect("render shape")
}

/// Renders the scene of `seed` in both domains. Depth and labels are shared
/// by construction; only appearance differs.
pub fn generate_scene<T: Scalar>(seed: u64, cfg: &SceneConfig) -> Result<ScenePair<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = layout(cfg, &mut rng);
    let n = cfg.size;
    let depth = Tensor::from_f64(vec![1, n, n], &geo.depth)?;
    let labels = LabelMap::new([1, n, n], geo.labels.clone())?;
    let sim_rgb = render(cfg, &geo, None);
    // The appearance noise has its own stream so the shift settings never
    // change the geometry drawn from `seed`.
    let mut shift_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let real_rgb = render(cfg, &geo, Some(&mut shift_rng));
    Ok(ScenePair {
        sim: SceneSample {
            rgb: sim_rgb,
            depth: Some(depth.clone()),
            labels: Some(labels.clone()),
            domain: Domain::Sim,
        },
        real: SceneSample {
            rgb: real_rgb,
            depth: Some(depth),
            labels: Some(labels),
            domain: Domain::Real,
        },
    })
}
