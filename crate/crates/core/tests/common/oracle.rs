//! A model whose predictions are read straight off the input image, and
//! datasets whose images encode their own ground truth.
//!
//! Depth comes from the red channel. Class 0 is a bright green pixel and
//! class 1 a bright blue one; the seg head reads green and blue as logits.

#![allow(dead_code)]

use latentbridge::data::{normalize_depth, MemoryDataset, SceneSample};
use latentbridge::labels::LabelMap;
use latentbridge::model::{ArchConfig, Domain, ModelBundle};
use latentbridge::Tensor;

pub const D_MIN: f64 = 1.0;
pub const D_MAX: f64 = 80.0;

pub fn oracle_arch(size: usize) -> ArchConfig {
    ArchConfig {
        name: "oracle".into(),
        image_size: size,
        depth_channels: 1,
        seg_classes: 2,
        ..ArchConfig::identity_toy()
    }
}

pub fn oracle_model(size: usize) -> ModelBundle<f64> {
    let mut m = ModelBundle::<f64>::zeros(&oracle_arch(size)).unwrap();
    let names: Vec<String> = m.params().keys().cloned().collect();
    for name in names {
        let t = m.get_mut(&name).unwrap();
        let s = t.shape().to_vec();
        let d = t.data_mut();
        if name.ends_with(".gamma") {
            d.fill(1.0);
        } else if name == "dec_depth.out.weight" {
            // (C_in, C_out, 1, 1): red → depth.
            d[0] = 1.0;
        } else if name == "dec_seg.out.weight" {
            // green → class 0, blue → class 1.
            d[s[1]] = 1.0;
            d[2 * s[1] + 1] = 1.0;
        } else if name.ends_with(".weight") {
            for c in 0..s[0].min(s[1]) {
                d[c * s[1] + c] = 1.0;
            }
        }
    }
    m
}

/// One image whose red channel is `depth` (metric, on the 8-bit grid of
/// `[D_MIN, D_MAX]`) and whose green/blue channels spell `labels`.
/// `gt_depth` is the stored ground truth, which may differ from `depth`.
pub fn oracle_sample(
    size: usize,
    depth: &[f64],
    gt_depth: &[f64],
    labels: &[u8],
    domain: Domain,
) -> SceneSample<f64> {
    let plane = size * size;
    let d = Tensor::from_f64(vec![1, size, size], depth).unwrap();
    let red = normalize_depth(&d, D_MIN, D_MAX).unwrap();
    let mut rgb = vec![-1.0; 3 * plane];
    rgb[..plane].copy_from_slice(red.data());
    for (i, &l) in labels.iter().enumerate() {
        rgb[(1 + l as usize) * plane + i] = 1.0;
    }
    SceneSample {
        rgb: Tensor::from_f64(vec![3, size, size], &rgb).unwrap(),
        depth: Some(Tensor::from_f64(vec![1, size, size], gt_depth).unwrap()),
        labels: Some(LabelMap::new([1, size, size], labels.to_vec()).unwrap()),
        domain,
    }
}

/// Metric depth of 8-bit level `b`.
pub fn level(b: u8) -> f64 {
    D_MIN + b as f64 / 255.0 * (D_MAX - D_MIN)
}

/// `count` images in each domain whose predictions under [`oracle_model`]
/// equal their ground truth.
pub fn oracle_dataset(size: usize, count: usize, seed: u64) -> MemoryDataset<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as u32
    };
    let mut make = |domain| {
        let depth: Vec<f64> = (0..size * size).map(|_| level((next() % 256) as u8)).collect();
        let labels: Vec<u8> = (0..size * size).map(|_| (next() % 2) as u8).collect();
        oracle_sample(size, &depth, &depth, &labels, domain)
    };
    let sim = (0..count).map(|_| make(Domain::Sim)).collect();
    let real = (0..count).map(|_| make(Domain::Real)).collect();
    MemoryDataset {
        sim,
        real,
        d_min: D_MIN,
        d_max: D_MAX,
    }
}
