//! Lossless spatial ↔ channel rearrangements (Space2Depth / Depth2Space).
//!
//! Channel layout is block-scan: output channel `c·r² + dy·r + dx` holds the
//! pixel at offset `(dy, dx)` inside each `r×r` block of input channel `c`.

use crate::error::{dim_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn space2depth<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(format!(
            "space2depth: spatial size {h}x{w} not divisible by factor {factor}"
        ));
    }
    let (oh, ow, r2) = (h / factor, w / factor, factor * factor);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let in_base = (b * c + ch) * h * w;
            for dy in 0..factor {
                for dx in 0..factor {
                    let oc = ch * r2 + dy * factor + dx;
                    let out_base = (b * c * r2 + oc) * oh * ow;
                    for i in 0..oh {
                        let row = in_base + (i * factor + dy) * w + dx;
                        let dst = &mut out[out_base + i * ow..out_base + (i + 1) * ow];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[row + j * factor];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c * r2, oh, ow], out)
}

pub fn depth2space<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let r2 = factor * factor;
    if factor == 0 || c % r2 != 0 {
        return dim_err(format!(
            "depth2space: {c} channels not divisible by factor² = {r2}"
        ));
    }
    let (oc, oh, ow) = (c / r2, h * factor, w * factor);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..oc {
            let out_base = (b * oc + ch) * oh * ow;
            for dy in 0..factor {
                for dx in 0..factor {
                    let ic = ch * r2 + dy * factor + dx;
                    let in_base = (b * c + ic) * h * w;
                    for i in 0..h {
                        let row = out_base + (i * factor + dy) * ow + dx;
                        let s = &src[in_base + i * w..in_base + (i + 1) * w];
                        for (j, &v) in s.iter().enumerate() {
                            out[row + j * factor] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

impl<T: Scalar> Graph<T> {
    pub fn space2depth(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = space2depth(self.value(x), factor)?;
        Ok(self.apply(
            value,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(depth2space(ctx.grad, factor)?)])),
        ))
    }

    pub fn depth2space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = depth2space(self.value(x), factor)?;
        Ok(self.apply(
            value,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(space2depth(ctx.grad, factor)?)])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn packs_2x2_block_in_scan_order() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space2depth(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = depth2space(&y, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(space2depth(&x, 1).unwrap(), x);
        assert_eq!(depth2space(&x, 1).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 4]);
        assert!(space2depth(&x, 2).is_err());
        let y = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        assert!(depth2space(&y, 2).is_err());
    }

    #[test]
    fn roundtrip_random_2x3x8x8() {
        let x = Tensor::<f32>::randn(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = depth2space(&space2depth(&x, 2).unwrap(), 2).unwrap();
        assert!(y.bitwise_eq(&x));
        let z = Tensor::<f32>::randn(&[1, 8, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let w = space2depth(&depth2space(&z, 2).unwrap(), 2).unwrap();
        assert!(w.bitwise_eq(&z));
    }

    proptest! {
        #[test]
        fn space2depth_depth2space_are_mutual_inverses(
            n in 1usize..3, c in 1usize..4, bh in 1usize..4, bw in 1usize..4,
            factor in 1usize..4, seed in any::<u64>(),
        ) {
            let x = Tensor::<f64>::randn(
                &[n, c, bh * factor, bw * factor], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let packed = space2depth(&x, factor).unwrap();
            prop_assert_eq!(packed.shape(), &[n, c * factor * factor, bh, bw][..]);
            prop_assert!(depth2space(&packed, factor).unwrap().bitwise_eq(&x));
            let y = Tensor::<f64>::randn(
                &[n, c * factor * factor, bh, bw], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            prop_assert!(space2depth(&depth2space(&y, factor).unwrap(), factor).unwrap().bitwise_eq(&y));
        }
    }
}
