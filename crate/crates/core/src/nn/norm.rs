//! Instance and batch normalization.
//!
//! Both normalize with biased variance and `NORM_EPS` in the denominator.
//! Batch norm always uses the statistics of the batch it is given; there are
//! no running averages, so forward passes stay pure functions of their inputs.

use crate::error::{dim_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each group of `len` values at `offsets(g)`; returns the
/// normalized values and the per-group inverse standard deviation.
fn normalize_groups<T: Scalar>(
    x: &[T],
    groups: usize,
    len: usize,
    index: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(NORM_EPS);
    let count = T::from_usize_lossy(len);
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let mean = (0..len).map(|j| x[index(g, j)]).sum::<T>() / count;
        let var = (0..len)
            .map(|j| {
                let d = x[index(g, j)] - mean;
                d * d
            })
            .sum::<T>()
            / count;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..len {
            let i = index(g, j);
            out[i] = (x[i] - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// `dx = inv_std · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))` per group.
fn normalize_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    len: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let count = T::from_usize_lossy(len);
    let mut dx = vec![T::zero(); dy.len()];
    for (g, &inv) in inv_std.iter().enumerate() {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for j in 0..len {
            let i = index(g, j);
            sum_dy = sum_dy + dy[i];
            sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
        }
        let (m1, m2) = (sum_dy / count, sum_dy_xhat / count);
        for j in 0..len {
            let i = index(g, j);
            dx[i] = inv * (dy[i] - m1 - xhat[i] * m2);
        }
    }
    dx
}

/// Per-sample, per-channel normalization over the spatial plane.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let (out, _) = normalize_groups(x.data(), n * c, plane, |g, j| g * plane + j);
    Tensor::new(x.shape().to_vec(), out)
}

fn batch_index(n_channels: usize, plane: usize) -> impl Fn(usize, usize) -> usize + Copy {
    // group = channel; j enumerates (sample, pixel)
    move |ch, j| ((j / plane) * n_channels + ch) * plane + j % plane
}

/// Per-channel normalization across batch and space, without affine terms.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let (out, _) = normalize_groups(x.data(), c, n * plane, batch_index(c, plane));
    Tensor::new(x.shape().to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let (out, inv_std) = normalize_groups(self.value(x).data(), n * c, plane, |g, j| g * plane + j);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.apply(
            value,
            &[x],
            Box::new(move |ctx| {
                let dx = normalize_backward(
                    ctx.grad.data(),
                    ctx.output.data(),
                    &inv_std,
                    plane,
                    |g, j| g * plane + j,
                );
                Ok(vec![Some(Tensor::new(ctx.grad.shape().to_vec(), dx)?)])
            }),
        ))
    }

    /// Batch norm with per-channel affine `gamma`, `beta` (shape `[C]`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!(
                "batch_norm: affine shapes {:?}/{:?}, expected [{c}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let plane = h * w;
        let idx = batch_index(c, plane);
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), c, n * plane, idx);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for ch in 0..c {
            for j in 0..n * plane {
                let i = idx(ch, j);
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.apply(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let dy = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let len = n * plane;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); dy.len()];
                for ch in 0..c {
                    for j in 0..len {
                        let i = idx(ch, j);
                        dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + dy[i];
                        dxhat[i] = dy[i] * gamma[ch];
                    }
                }
                let dx = ctx.needs[0]
                    .then(|| {
                        let d = normalize_backward(&dxhat, &xhat, &inv_std, len, idx);
                        Tensor::new(ctx.grad.shape().to_vec(), d)
                    })
                    .transpose()?;
                Ok(vec![
                    dx,
                    ctx.needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
                    ctx.needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
                ])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 4.5);
        assert!(instance_norm(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(batch_norm(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let y = instance_norm(&x).unwrap();
        let expect = 1.0 / (1.0f64 + NORM_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn instance_norm_moments_per_slice() {
        // Large spread keeps the eps-induced shrinkage eps/var below 1e-6.
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 10.0, &mut ChaCha8Rng::seed_from_u64(5))
            .map(|v| v + 3.0);
        let y = instance_norm(&x).unwrap();
        for s in 0..6 {
            let v = &y.data()[s * 16..(s + 1) * 16];
            let mean = v.iter().sum::<f64>() / 16.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batch_norm_moments_per_channel() {
        let x = Tensor::<f64>::randn(&[3, 2, 2, 2], 1.5, &mut ChaCha8Rng::seed_from_u64(6));
        let y = batch_norm(&x).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
