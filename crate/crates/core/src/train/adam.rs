//! Bias-corrected Adam over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "optimizer needs lr > 0, 0 <= beta1, beta2 < 1 and eps > 0; got {self:?}"
            )))
        }
    }
}

/// First and second moment estimates keyed by canonical parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    /// Applied updates.
    pub step: u64,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN/Inf; no parameter or moment changed.
    Skipped,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            skipped: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter named in `grads`. Names resolve
/// through the model's aliases, so each shared tensor must appear once, with
/// the gradient summed over all of its uses.
pub fn adam_step<T: Scalar>(
    model: &mut ModelBundle<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    let mut seen = BTreeMap::new();
    for (name, g) in grads {
        let canonical = model.canonical(name).to_string();
        if let Some(prev) = seen.insert(canonical.clone(), name) {
            return Err(Error::Usage(format!(
                "gradients for `{prev}` and `{name}` target the same storage `{canonical}`"
            )));
        }
        let p = model.param(&canonical)?;
        p.expect_same_shape(g)?;
        if !g.all_finite() {
            state.skipped += 1;
            return Ok(StepOutcome::Skipped);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::from_f64_lossy(cfg.lr), T::from_f64_lossy(cfg.eps));
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    for (name, g) in grads {
        let canonical = model.canonical(name).to_string();
        let m = state
            .m
            .entry(canonical.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(canonical.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = model
            .get_mut(&canonical)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{canonical}`")))?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
