//! Depth error metrics, segmentation mIoU and pixel accuracy, and their
//! aggregation over a dataset.

pub mod eval;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use eval::{evaluate_model, resize_bilinear, resize_nearest, EvalOptions, Resize, Task};

/// The four depth errors, lower is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Dataset-level metrics, each the arithmetic mean of per-image values.
/// Fields of tasks that were not evaluated are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub log_rmse: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    /// Mean per-pixel cross-entropy of the segmentation logits at native
    /// resolution.
    pub cross_entropy: Option<f64>,
    pub n_images: usize,
}

const CSV_COLUMNS: [&str; 8] = [
    "abs_rel",
    "sq_rel",
    "rmse",
    "log_rmse",
    "miou",
    "pixel_accuracy",
    "cross_entropy",
    "n_images",
];

impl MetricReport {
    fn cells(&self) -> [Option<f64>; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.log_rmse,
            self.miou,
            self.pixel_accuracy,
            self.cross_entropy,
        ]
    }

    /// Header plus one row; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut row: Vec<String> = self
            .cells()
            .iter()
            .map(|c| c.map_or(String::new(), |v| format!("{v}")))
            .collect();
        row.push(self.n_images.to_string());
        format!("{}\n{}\n", CSV_COLUMNS.join(","), row.join(","))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn set_depth(&mut self, m: DepthMetrics) {
        self.abs_rel = Some(m.abs_rel);
        self.sq_rel = Some(m.sq_rel);
        self.rmse = Some(m.rmse);
        self.log_rmse = Some(m.log_rmse);
    }

    pub fn set_seg(&mut self, m: SegMetrics) {
        self.miou = Some(m.miou);
        self.pixel_accuracy = Some(m.pixel_accuracy);
    }
}

/// Fixed-width table row in column order, `-` for missing values.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in &CSV_COLUMNS[..7] {
            write!(f, "{name:>15}")?;
        }
        writeln!(f, "{:>10}", "n_images")?;
        for c in self.cells() {
            match c {
                Some(v) => write!(f, "{v:>15.6}")?,
                None => write!(f, "{:>15}", "-")?,
            }
        }
        write!(f, "{:>10}", self.n_images)
    }
}

/// Depth errors over pixels where `gt > 0` and `valid` (if given) holds.
/// Predictions are clamped to `[d_min, d_max]` first, which keeps the log
/// finite. Logs are natural.
pub fn depth_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: Option<&[bool]>,
    d_min: f64,
    d_max: f64,
) -> Result<DepthMetrics> {
    pred.expect_same_shape(gt)?;
    if valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::Dimension(format!(
            "valid mask of {} entries for {} pixels",
            valid.map_or(0, |v| v.len()),
            gt.len()
        )));
    }
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::Usage(format!("depth clamp needs 0 < d_min < d_max, got [{d_min}, {d_max}]")));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let g = g.as_f64();
        if !(g > 0.0) || valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let p = p.as_f64();
        if p.is_nan() {
            return Err(Error::NonFinite("depth prediction".into()));
        }
        let p = p.clamp(d_min, d_max);
        let e = g - p;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        sq_log += (g.ln() - p.ln()).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no valid depth pixels".into()));
    }
    let n = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        log_rmse: (sq_log / n).sqrt(),
    })
}

/// Pixel accuracy and mIoU over pixels whose ground truth is not `ignore`.
/// IoU is averaged over the classes present in the ground truth or the
/// prediction of those pixels. A predicted `ignore` counts as wrong.
pub fn segmentation_metrics(
    pred: &LabelMap,
    gt: &LabelMap,
    ignore: u8,
    classes: usize,
) -> Result<SegMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let check = |m: &LabelMap, what: &str| {
        match m.data().iter().find(|&&v| v != ignore && v as usize >= classes) {
            Some(v) => Err(Error::Data(format!("{what} label {v} outside {classes} classes"))),
            None => Ok(()),
        }
    };
    check(pred, "predicted")?;
    check(gt, "ground-truth")?;
    // Rows are ground truth, columns prediction; the extra column holds
    // predicted `ignore`.
    let mut conf = vec![0usize; classes * (classes + 1)];
    let mut total = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == ignore {
            continue;
        }
        let col = if p == ignore { classes } else { p as usize };
        conf[g as usize * (classes + 1) + col] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Empty("every pixel is ignored".into()));
    }
    let at = |g: usize, p: usize| conf[g * (classes + 1) + p];
    let correct: usize = (0..classes).map(|c| at(c, c)).sum();
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let tp = at(c, c);
        let gt_c: usize = (0..=classes).map(|p| at(c, p)).sum();
        let pred_c: usize = (0..classes).map(|g| at(g, c)).sum();
        let union = gt_c + pred_c - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    Ok(SegMetrics {
        // `total > 0` means some gt class is present.
        miou: iou_sum / present as f64,
        pixel_accuracy: correct as f64 / total as f64,
    })
}
