//! Individual loss terms, each as a plain tensor function and as a graph op
//! with an analytic backward rule.

use crate::error::{dim_err, Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian kernel `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdKernel {
    sigma: f64,
}

impl MmdKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Self { sigma })
        } else {
            Err(Error::Usage(format!("kernel bandwidth must be positive, got {sigma}")))
        }
    }

    /// `σ = √(d / 2)` for `d`-dimensional vectors, so `2σ² = d`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            sigma: (d as f64 / 2.0).sqrt(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eval<T: Scalar>(&self, x: &[T], y: &[T]) -> T {
        let d2: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
        (-d2 / T::from_f64_lossy(2.0 * self.sigma * self.sigma)).exp()
    }
}

fn batch_rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let n = t.shape()[0];
    Ok((n, t.len() / n))
}

fn kl_value<T: Scalar>(mu: &[T], logvar: &[T], n: usize) -> T {
    let half = T::from_f64_lossy(0.5);
    let s: T = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum();
    s / T::from_usize_lossy(n)
}

/// `Σ ½(μ² + e^{logvar} − 1 − logvar)` over latent elements, averaged over
/// the batch.
pub fn kl_to_standard_normal<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<T> {
    mu.expect_same_shape(logvar)?;
    mu.ensure_finite("kl mu")?;
    logvar.ensure_finite("kl logvar")?;
    Ok(kl_value(mu.data(), logvar.data(), mu.shape()[0]))
}

fn mse_value<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::from_usize_lossy(a.len())
}

/// Mean squared difference.
pub fn recon_mse<T: Scalar>(x: &Tensor<T>, recon: &Tensor<T>) -> Result<T> {
    x.expect_same_shape(recon)?;
    Ok(mse_value(x.data(), recon.data()))
}

/// Unit-variance Gaussian negative log-likelihood without its constant,
/// `½ · MSE`.
pub fn gaussian_nll<T: Scalar>(x: &Tensor<T>, recon: &Tensor<T>) -> Result<T> {
    Ok(recon_mse(x, recon)? * T::from_f64_lossy(0.5))
}

fn l1_value<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    s / T::from_usize_lossy(a.len())
}

/// Mean absolute difference.
pub fn cycle_consistency<T: Scalar>(x: &Tensor<T>, cycled: &Tensor<T>) -> Result<T> {
    x.expect_same_shape(cycled)?;
    Ok(l1_value(x.data(), cycled.data()))
}

/// Row `i` of a batch-major buffer with rows of length `d`.
fn row<T>(data: &[T], i: usize, d: usize) -> &[T] {
    &data[i * d..(i + 1) * d]
}

fn gram<T: Scalar>(a: &[T], na: usize, b: &[T], nb: usize, d: usize, k: &MmdKernel) -> Vec<T> {
    let mut out = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            out.push(k.eval(row(a, i, d), row(b, j, d)));
        }
    }
    out
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len())
}

fn check_mmd_inputs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (na, da) = batch_rows(a)?;
    let (nb, db) = batch_rows(b)?;
    if da != db {
        return dim_err(format!("mmd: vector dimensions {da} and {db} differ"));
    }
    Ok((na, nb, da))
}

/// Biased V-statistic estimate of the squared MMD between the rows of `a`
/// and the rows of `b` (each batch-major, flattened past the first axis).
pub fn mmd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kernel: &MmdKernel) -> Result<T> {
    let (na, nb, d) = check_mmd_inputs(a, b)?;
    let kaa = gram(a.data(), na, a.data(), na, d, kernel);
    let kbb = gram(b.data(), nb, b.data(), nb, d, kernel);
    let kab = gram(a.data(), na, b.data(), nb, d, kernel);
    Ok(mean(&kaa) + mean(&kbb) - T::from_f64_lossy(2.0) * mean(&kab))
}

fn check_ce_inputs<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.shape() != [n, h, w] {
        return dim_err(format!(
            "cross entropy: logits {:?} against labels {:?}",
            logits.shape(),
            labels.shape()
        ));
    }
    labels.check_range(c)?;
    let valid = labels.data().iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Err(Error::Empty("cross entropy: every pixel is ignored".into()));
    }
    Ok((c, h * w, valid))
}

/// Per-pixel `(log Σ_j e^{x_j}, softmax)` with the maximum subtracted first.
fn log_softmax_pixel<T: Scalar>(logits: &[T], base: usize, c: usize, plane: usize, probs: &mut [T]) -> T {
    let mut m = T::neg_infinity();
    for k in 0..c {
        m = m.max(logits[base + k * plane]);
    }
    let mut s = T::zero();
    for (k, p) in probs.iter_mut().enumerate().take(c) {
        *p = (logits[base + k * plane] - m).exp();
        s = s + *p;
    }
    for p in probs.iter_mut().take(c) {
        *p = *p / s;
    }
    m + s.ln()
}

fn ce_value<T: Scalar>(logits: &[T], labels: &[u8], n: usize, c: usize, plane: usize, valid: usize) -> T {
    let mut probs = vec![T::zero(); c];
    let mut total = T::zero();
    for b in 0..n {
        for p in 0..plane {
            let l = labels[b * plane + p];
            if l == IGNORE {
                continue;
            }
            let base = b * c * plane + p;
            let lse = log_softmax_pixel(logits, base, c, plane, &mut probs);
            total = total + lse - logits[base + l as usize * plane];
        }
    }
    total / T::from_usize_lossy(valid)
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
pub fn pixelwise_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<T> {
    let (c, plane, valid) = check_ce_inputs(logits, labels)?;
    Ok(ce_value(logits.data(), labels.data(), logits.shape()[0], c, plane, valid))
}

/// Graph versions of the loss terms. Each returns a scalar node.
impl<T: Scalar> Graph<T> {
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.value(mu).expect_same_shape(self.value(logvar))?;
        let n = self.shape(mu)[0];
        let value = kl_value(self.value(mu).data(), self.value(logvar).data(), n);
        Ok(self.apply(
            Tensor::scalar(value),
            &[mu, logvar],
            Box::new(move |ctx| {
                let s = ctx.grad.data()[0] / T::from_usize_lossy(n);
                let half = T::from_f64_lossy(0.5);
                let dmu = ctx.needs[0].then(|| ctx.inputs[0].scale(s));
                let dlv = ctx.needs[1].then(|| ctx.inputs[1].map(|lv| s * half * (lv.exp() - T::one())));
                Ok(vec![dmu, dlv])
            }),
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b))?;
        let value = mse_value(self.value(a).data(), self.value(b).data());
        Ok(self.apply(
            Tensor::scalar(value),
            &[a, b],
            Box::new(|ctx| {
                let s = ctx.grad.data()[0] * T::from_f64_lossy(2.0)
                    / T::from_usize_lossy(ctx.inputs[0].len());
                let d = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| s * (x - y))?;
                let nb = ctx.needs[1].then(|| d.scale(-T::one()));
                Ok(vec![ctx.needs[0].then_some(d), nb])
            }),
        ))
    }

    /// `½ · mse(a, b)`.
    pub fn gaussian_nll(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mse(a, b)?;
        Ok(self.scale(m, T::from_f64_lossy(0.5)))
    }

    /// Mean absolute difference; the subgradient at equality is zero.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b))?;
        let value = l1_value(self.value(a).data(), self.value(b).data());
        Ok(self.apply(
            Tensor::scalar(value),
            &[a, b],
            Box::new(|ctx| {
                let s = ctx.grad.data()[0] / T::from_usize_lossy(ctx.inputs[0].len());
                let d = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        T::zero()
                    }
                })?;
                let nb = ctx.needs[1].then(|| d.scale(-T::one()));
                Ok(vec![ctx.needs[0].then_some(d), nb])
            }),
        ))
    }

    /// Biased squared MMD between the rows of `a` and `b`.
    pub fn mmd(&mut self, a: Var, b: Var, kernel: MmdKernel) -> Result<Var> {
        let (na, nb, d) = check_mmd_inputs(self.value(a), self.value(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let kaa = gram(ad, na, ad, na, d, &kernel);
        let kbb = gram(bd, nb, bd, nb, d, &kernel);
        let kab = gram(ad, na, bd, nb, d, &kernel);
        let value = mean(&kaa) + mean(&kbb) - T::from_f64_lossy(2.0) * mean(&kab);
        let inv_s2 = T::from_f64_lossy(1.0 / (kernel.sigma() * kernel.sigma()));
        Ok(self.apply(
            Tensor::scalar(value),
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                // ∂k(x, y)/∂x = −k(x, y)(x − y)/σ².
                let grad_side = |xs: &[T], nx: usize, kxx: &[T], ys: &[T], ny: usize, kxy: &[T], kxy_t: bool| {
                    let self_w = T::from_f64_lossy(2.0) / T::from_usize_lossy(nx * nx);
                    let cross_w = T::from_f64_lossy(2.0) / T::from_usize_lossy(nx * ny);
                    let mut out = vec![T::zero(); nx * d];
                    for i in 0..nx {
                        let xi = row(xs, i, d);
                        let o = &mut out[i * d..(i + 1) * d];
                        for j in 0..nx {
                            let c = -self_w * kxx[i * nx + j] * inv_s2;
                            for ((o, &a), &b) in o.iter_mut().zip(xi).zip(row(xs, j, d)) {
                                *o = *o + c * (a - b);
                            }
                        }
                        for j in 0..ny {
                            let kv = if kxy_t { kxy[j * nx + i] } else { kxy[i * ny + j] };
                            let c = cross_w * kv * inv_s2;
                            for ((o, &a), &b) in o.iter_mut().zip(xi).zip(row(ys, j, d)) {
                                *o = *o + c * (a - b);
                            }
                        }
                        for v in o.iter_mut() {
                            *v = *v * g;
                        }
                    }
                    out
                };
                let da = if ctx.needs[0] {
                    let v = grad_side(ad, na, &kaa, bd, nb, &kab, false);
                    Some(Tensor::new(ctx.inputs[0].shape().to_vec(), v)?)
                } else {
                    None
                };
                let db = if ctx.needs[1] {
                    let v = grad_side(bd, nb, &kbb, ad, na, &kab, true);
                    Some(Tensor::new(ctx.inputs[1].shape().to_vec(), v)?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }),
        ))
    }

    /// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let (c, plane, valid) = check_ce_inputs(self.value(logits), labels)?;
        let n = self.shape(logits)[0];
        let value = ce_value(self.value(logits).data(), labels.data(), n, c, plane, valid);
        let labels = labels.data().to_vec();
        Ok(self.apply(
            Tensor::scalar(value),
            &[logits],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let s = ctx.grad.data()[0] / T::from_usize_lossy(valid);
                let mut out = vec![T::zero(); x.len()];
                let mut probs = vec![T::zero(); c];
                for b in 0..n {
                    for p in 0..plane {
                        let l = labels[b * plane + p];
                        if l == IGNORE {
                            continue;
                        }
                        let base = b * c * plane + p;
                        log_softmax_pixel(x, base, c, plane, &mut probs);
                        for (k, &pk) in probs.iter().enumerate() {
                            let target = if k == l as usize { T::one() } else { T::zero() };
                            out[base + k * plane] = s * (pk - target);
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), out)?)])
            }),
        ))
    }
}
