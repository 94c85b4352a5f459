//! Model evaluation: inference, resizing and per-image averaging.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_depth, SceneSource};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::metrics::{depth_metrics, segmentation_metrics, DepthMetrics, MetricReport, SegMetrics};
use crate::model::{predict, Domain, Head, ModelBundle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Seg,
    Both,
}

impl Task {
    fn depth(self) -> bool {
        self != Task::Seg
    }

    fn seg(self) -> bool {
        self != Task::Depth
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Task::Depth),
            "seg" => Ok(Task::Seg),
            "both" => Ok(Task::Both),
            _ => Err(Error::Usage(format!("unknown task `{s}`; valid tasks: depth, seg, both"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Depth => "depth",
            Task::Seg => "seg",
            Task::Both => "both",
        })
    }
}

/// Resolution at which predictions and ground truth are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Native,
    Square(usize),
}

impl Default for Resize {
    fn default() -> Self {
        Resize::Square(256)
    }
}

impl FromStr for Resize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "native" {
            return Ok(Resize::Native);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Resize::Square(n)),
            _ => Err(Error::Usage(format!("resize must be `native` or a positive size, got `{s}`"))),
        }
    }
}

impl fmt::Display for Resize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resize::Native => f.write_str("native"),
            Resize::Square(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Resize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Resize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let s = match &v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => return Err(serde::de::Error::custom("resize must be `native` or a size")),
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub task: Task,
    pub resize: Resize,
    /// Which split is scored, through its own encoder.
    pub domain: Domain,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            task: Task::Both,
            resize: Resize::default(),
            domain: Domain::Real,
        }
    }
}

/// Bilinear resize of an `h`×`w` plane with half-pixel centers and edge
/// clamping. Taps outside `valid` are dropped and the remaining weights
/// renormalized; an output pixel with no valid weight is invalid.
pub fn resize_bilinear(
    src: &[f64],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    valid: Option<&[bool]>,
) -> (Vec<f64>, Vec<bool>) {
    let taps = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    let mut ok = vec![false; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = taps(ox, w, ow);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let i = y * w + x;
                    let wt = wy * wx;
                    if wt > 0.0 && valid.is_none_or(|v| v[i]) {
                        acc += wt * src[i];
                        wsum += wt;
                    }
                }
            }
            if wsum > 0.0 {
                out[oy * ow + ox] = acc / wsum;
                ok[oy * ow + ox] = true;
            }
        }
    }
    (out, ok)
}

/// Nearest-neighbour resize with half-pixel centers.
pub fn resize_nearest<V: Copy>(src: &[V], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<V> {
    let pick = |o: usize, n_in: usize, n_out: usize| ((o * 2 + 1) * n_in / (n_out * 2)).min(n_in - 1);
    (0..oh)
        .flat_map(|oy| (0..ow).map(move |ox| (oy, ox)))
        .map(|(oy, ox)| src[pick(oy, h, oh) * w + pick(ox, w, ow)])
        .collect()
}

struct ImageScore {
    depth: Option<DepthMetrics>,
    seg: Option<SegMetrics>,
    ce: Option<f64>,
}

/// Mean cross-entropy of (C, H, W) logits against labels, ignoring `IGNORE`.
fn cross_entropy<T: Scalar>(logits: &[T], labels: &[u8], classes: usize) -> Option<f64> {
    let plane = labels.len();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let z = |c: usize| logits[c * plane + i].as_f64();
        let m = (0..classes).map(z).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..classes).map(|c| (z(c) - m).exp()).sum::<f64>().ln();
        sum += lse - z(l as usize);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn argmax_labels<T: Scalar>(logits: &[T], classes: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * plane + i] > logits[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn score_image<T: Scalar>(
    model: &ModelBundle<T>,
    data: &dyn SceneSource<T>,
    opts: &EvalOptions,
    index: usize,
) -> Result<ImageScore> {
    let s = data.sample(opts.domain, index)?;
    let n = s.size();
    let (oh, ow) = match opts.resize {
        Resize::Native => (n, n),
        Resize::Square(m) => (m, m),
    };
    let x = s.rgb.clone().reshape(vec![1, 3, n, n])?;
    let mut score = ImageScore {
        depth: None,
        seg: None,
        ce: None,
    };
    if opts.task.depth() {
        let gt = s.require_depth()?;
        let (d_min, d_max) = data.depth_range();
        let pred = denormalize_depth(&predict(model, &x, opts.domain, Head::Depth)?, d_min, d_max)?;
        let (pred, _) = resize_bilinear(&pred.to_f64_vec(), (n, n), (oh, ow), None);
        let gt_valid: Vec<bool> = gt.data().iter().map(|v| v.as_f64() > 0.0).collect();
        let (gt, valid) = resize_bilinear(&gt.to_f64_vec(), (n, n), (oh, ow), Some(&gt_valid));
        let shape = vec![oh, ow];
        score.depth = Some(depth_metrics(
            &Tensor::<f64>::new(shape.clone(), pred)?,
            &Tensor::<f64>::new(shape, gt)?,
            Some(&valid),
            d_min,
            d_max,
        )?);
    }
    if opts.task.seg() {
        let gt = s.require_labels()?;
        let classes = model.arch().seg_classes;
        gt.check_range(classes)?;
        let logits = predict(model, &x, opts.domain, Head::Seg)?;
        score.ce = cross_entropy(logits.data(), gt.data(), classes);
        let pred = argmax_labels(logits.data(), classes, n * n);
        let pred = LabelMap::new([1, oh, ow], resize_nearest(&pred, (n, n), (oh, ow)))?;
        let gt = LabelMap::new([1, oh, ow], resize_nearest(gt.data(), (n, n), (oh, ow)))?;
        score.seg = Some(segmentation_metrics(&pred, &gt, IGNORE, classes)?);
    }
    Ok(score)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every image of `opts.domain` with mean-mode inference, one image
/// per forward pass, and averages the per-image metrics.
pub fn evaluate_model<T: Scalar>(
    model: &ModelBundle<T>,
    data: &dyn SceneSource<T>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let count = data.len(opts.domain);
    if count == 0 {
        return Err(Error::Empty(format!("no {} images to evaluate", opts.domain)));
    }
    let scores = (0..count)
        .into_par_iter()
        .map(|i| score_image(model, data, opts, i))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport {
        n_images: count,
        ..MetricReport::default()
    };
    if opts.task.depth() {
        let d: Vec<DepthMetrics> = scores.iter().filter_map(|s| s.depth).collect();
        report.set_depth(DepthMetrics {
            abs_rel: mean(d.iter().map(|m| m.abs_rel)).unwrap_or(0.0),
            sq_rel: mean(d.iter().map(|m| m.sq_rel)).unwrap_or(0.0),
            rmse: mean(d.iter().map(|m| m.rmse)).unwrap_or(0.0),
            log_rmse: mean(d.iter().map(|m| m.log_rmse)).unwrap_or(0.0),
        });
    }
    if opts.task.seg() {
        let s: Vec<SegMetrics> = scores.iter().filter_map(|s| s.seg).collect();
        report.set_seg(SegMetrics {
            miou: mean(s.iter().map(|m| m.miou)).unwrap_or(0.0),
            pixel_accuracy: mean(s.iter().map(|m| m.pixel_accuracy)).unwrap_or(0.0),
        });
        report.cross_entropy = mean(scores.iter().filter_map(|s| s.ce));
    }
    Ok(report)
}
