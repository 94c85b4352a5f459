//! Central finite-difference verification of analytic gradients (float64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound of the relative-error denominator. Exact-zero gradients
    /// (e.g. biases feeding a norm) leave only roundoff of order
    /// `eps·|f|/step` in the numeric estimate.
    pub floor: f64,
    /// Check only this many randomly chosen elements across all inputs.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            sample: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: Vec<ElementCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ElementCheck> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Dimension("grad_check: function is not scalar-valued".into()));
    }
    Ok(g.scalar(out))
}

/// Compares the tape gradient of scalar `f` with central finite differences at
/// `inputs`. Non-finite values anywhere produce an error naming the location.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for (i, t) in inputs.iter().enumerate() {
        t.ensure_finite(&format!("grad_check input {i}"))?;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.ensure_finite(out, "grad_check output")?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    for (i, a) in analytic.iter().enumerate() {
        a.ensure_finite(&format!("analytic gradient of input {i}"))?;
    }

    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let flat: Vec<usize> = match opts.sample {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checked = Vec::with_capacity(flat.len());
    let mut max_rel_err: f64 = 0.0;
    for flat_index in flat {
        let (input, index) = locate(inputs, flat_index);
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + opts.step;
        let plus = evaluate(&f, &work)?;
        work[input].data_mut()[index] = orig - opts.step;
        let minus = evaluate(&f, &work)?;
        work[input].data_mut()[index] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: perturbed output at input {input} element {index}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[input].data()[index];
        let rel_err = relative_error(a, numeric, opts.floor);
        max_rel_err = max_rel_err.max(rel_err);
        checked.push(ElementCheck {
            input,
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
    })
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("flat index beyond total length")
}
