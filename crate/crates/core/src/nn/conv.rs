//! Stride-1 convolutions: 2D (im2col + GEMM), transposed 2D, and a direct 3D
//! kernel for the packing layers.

use crate::error::{dim_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on column-matrix entries; larger forward convolutions are
/// lowered in bands of output rows.
const COL_BUDGET: usize = 1 << 24;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `[lo, hi)` of output positions whose tap `kk` lands inside `[0, extent)`.
    fn valid(out: usize, extent: usize, kk: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(kk);
        let hi = (extent + pad).saturating_sub(kk).min(out);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        self.im2col_band(x, col, 0, self.oh);
    }

    /// Column matrix restricted to output rows `[y0, y1)`; `col` holds
    /// `col_rows() × (y1 − y0)·ow` entries.
    fn im2col_band<T: Scalar>(&self, x: &[T], col: &mut [T], y0: usize, y1: usize) {
        let Geometry { c, h, w, k, pad, oh, ow } = *self;
        let plane = (y1 - y0) * ow;
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = Self::valid(oh, h, ky, pad);
                let (y_lo, y_hi) = (y_lo.max(y0), y_hi.min(y1));
                for kx in 0..k {
                    let (x_lo, x_hi) = Self::valid(ow, w, kx, pad);
                    let row = ((ci * k + ky) * k + kx) * plane;
                    let dst = &mut col[row..row + plane];
                    // Zero only the padding taps; every other entry is copied.
                    let (vy_lo, vy_hi) = (y_lo.min(y1), y_hi.max(y_lo.min(y1)));
                    dst[..(vy_lo - y0) * ow].fill(T::zero());
                    dst[(vy_hi - y0) * ow..].fill(T::zero());
                    for oy in vy_lo..vy_hi {
                        let iy = oy + ky - pad;
                        let d = (oy - y0) * ow;
                        let line = &mut dst[d..d + ow];
                        if x_lo >= x_hi {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        line[x_lo..x_hi].copy_from_slice(&src[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let Geometry { c, h, w, k, pad, oh, ow } = *self;
        let plane = oh * ow;
        for ci in 0..c {
            let dst = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = Self::valid(oh, h, ky, pad);
                for kx in 0..k {
                    let (x_lo, x_hi) = Self::valid(ow, w, kx, pad);
                    let row = ((ci * k + ky) * k + kx) * plane;
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - pad;
                        let s = &col[row + oy * ow + x_lo..row + oy * ow + x_hi];
                        let d = &mut dst[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }

    /// 1×1 unpadded convs read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.oh == self.h && self.ow == self.w
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return dim_err(format!(
            "conv2d: input has {c} channels, weight expects {ci}"
        ));
    }
    if kh != kw {
        return dim_err(format!("conv2d: non-square kernel {kh}x{kw}"));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return dim_err(format!("conv2d: bias shape {:?}, expected [{co}]", b.shape()));
        }
    }
    let k = kh;
    if h + 2 * pad < k || w + 2 * pad < k {
        return dim_err(format!("conv2d: kernel {k} larger than padded input {h}x{w}"));
    }
    let geo = Geometry {
        c,
        h,
        w,
        k,
        pad,
        oh: h + 2 * pad - k + 1,
        ow: w + 2 * pad - k + 1,
    };
    Ok((n, co, geo))
}

/// Stride-1 2D convolution. `weight` is `(C_out, C_in, K, K)`; output spatial
/// size is `H + 2·padding − K + 1`, so `padding = (K − 1) / 2` preserves it for
/// odd kernels.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, co, geo) = conv_geometry(x, weight, bias, padding)?;
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.c * geo.h * geo.w;
    let mut out = vec![T::zero(); n * co * cols];
    let band = if geo.is_pointwise() {
        geo.oh
    } else {
        (COL_BUDGET / (rows * geo.ow).max(1)).clamp(1, geo.oh)
    };
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * band * geo.ow]
    };
    let mut tmp = if band < geo.oh {
        vec![T::zero(); co * band * geo.ow]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * co * cols..(b + 1) * co * cols];
        if geo.is_pointwise() {
            T::gemm(co, rows, cols, weight.data(), false, xs, false, dst, false);
        } else if band == geo.oh {
            geo.im2col(xs, &mut col);
            T::gemm(co, rows, cols, weight.data(), false, &col, false, dst, false);
        } else {
            let mut y0 = 0;
            while y0 < geo.oh {
                let y1 = (y0 + band).min(geo.oh);
                let width = (y1 - y0) * geo.ow;
                geo.im2col_band(xs, &mut col[..rows * width], y0, y1);
                let t = &mut tmp[..co * width];
                T::gemm(co, rows, width, weight.data(), false, &col[..rows * width], false, t, false);
                for o in 0..co {
                    let at = o * cols + y0 * geo.ow;
                    dst[at..at + width].copy_from_slice(&t[o * width..(o + 1) * width]);
                }
                y0 = y1;
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * cols..(o + 1) * cols] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(vec![n, co, geo.oh, geo.ow], out)
}

struct ConvGrads<T> {
    input: Option<Tensor<T>>,
    weight: Option<Tensor<T>>,
    bias: Option<Tensor<T>>,
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    padding: usize,
    needs: [bool; 3],
) -> Result<ConvGrads<T>> {
    let (n, co, geo) = conv_geometry(x, weight, None, padding)?;
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.c * geo.h * geo.w;
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = needs[1].then(|| vec![T::zero(); weight.len()]);
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = if needs[0] && !geo.is_pointwise() {
        vec![T::zero(); rows * cols]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let g = &grad.data()[b * co * cols..(b + 1) * co * cols];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
            let cmat: &[T] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut col);
                &col
            };
            T::gemm(co, cols, rows, g, false, cmat, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * in_plane..(b + 1) * in_plane];
            if geo.is_pointwise() {
                T::gemm(rows, co, cols, weight.data(), true, g, false, dst, false);
            } else {
                T::gemm(rows, co, cols, weight.data(), true, g, false, &mut dcol, false);
                geo.col2im(&dcol, dst);
            }
        }
    }
    let db = needs[2].then(|| {
        let mut db = vec![T::zero(); co];
        for b in 0..n {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * co + o) * cols;
                *acc = *acc + grad.data()[start..start + cols].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(vec![co], d)).transpose()?,
    })
}

/// `(C_in, C_out, K, K)` transposed-conv weight → equivalent `(C_out, C_in, K, K)`
/// conv weight with the kernel flipped.
fn transpose_kernel<T: Scalar>(weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b, k, k2) = weight.dims4()?;
    let src = weight.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for y in 0..k {
                for x in 0..k2 {
                    out[((j * a + i) * k + (k - 1 - y)) * k2 + (k2 - 1 - x)] =
                        src[((i * b + j) * k + y) * k2 + x];
                }
            }
        }
    }
    Tensor::new(vec![b, a, k, k2], out)
}

/// Stride-1 transposed convolution. `weight` is `(C_in, C_out, K, K)`; output
/// spatial size is `H + K − 1 − 2·padding`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (_, _, k, _) = weight.dims4()?;
    if padding > k - 1 {
        return dim_err(format!(
            "conv_transpose2d: padding {padding} exceeds kernel extent {k}"
        ));
    }
    conv2d(x, &transpose_kernel(weight)?, bias, k - 1 - padding)
}

/// 3D convolution over `(N, C, D, H, W)` with "same" padding on every axis
/// (`(K − 1) / 2` before, the remainder after), so even kernel extents are
/// allowed. `weight` is `(C_out, C_in, KD, KH, KW)`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = Conv3dGeometry::new(x, weight, bias)?;
    let mut out = vec![T::zero(); g.n * g.co * g.vol()];
    for b in 0..g.n {
        for o in 0..g.co {
            let dst = &mut out[(b * g.co + o) * g.vol()..(b * g.co + o + 1) * g.vol()];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            for i in 0..g.ci {
                let src = &x.data()[(b * g.ci + i) * g.vol()..(b * g.ci + i + 1) * g.vol()];
                g.for_each_tap(o, i, weight.data(), |wv, s_off, d_off, len| {
                    let s = &src[s_off..s_off + len];
                    let d = &mut dst[d_off..d_off + len];
                    for (a, &v) in d.iter_mut().zip(s) {
                        *a = *a + wv * v;
                    }
                });
            }
        }
    }
    Tensor::new(vec![g.n, g.co, g.d, g.h, g.w], out)
}

struct Conv3dGeometry {
    n: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl Conv3dGeometry {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        let [n, ci, d, h, w] = x.shape()[..] else {
            return dim_err(format!("conv3d: expected rank-5 input, got {:?}", x.shape()));
        };
        let [co, wci, kd, kh, kw] = weight.shape()[..] else {
            return dim_err(format!("conv3d: expected rank-5 weight, got {:?}", weight.shape()));
        };
        if wci != ci {
            return dim_err(format!("conv3d: input has {ci} channels, weight expects {wci}"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return dim_err(format!("conv3d: bias shape {:?}, expected [{co}]", b.shape()));
            }
        }
        Ok(Self { n, ci, co, d, h, w, kd, kh, kw })
    }

    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Calls `f(weight, src_offset, dst_offset, run_length)` for every
    /// contiguous row segment touched by each kernel tap of filter `(o, i)`.
    fn for_each_tap<T: Scalar>(
        &self,
        o: usize,
        i: usize,
        weight: &[T],
        mut f: impl FnMut(T, usize, usize, usize),
    ) {
        let (pd, ph, pw) = ((self.kd - 1) / 2, (self.kh - 1) / 2, (self.kw - 1) / 2);
        let wbase = (o * self.ci + i) * self.kd * self.kh * self.kw;
        for a in 0..self.kd {
            let (d_lo, d_hi) = Geometry::valid(self.d, self.d, a, pd);
            for bq in 0..self.kh {
                let (h_lo, h_hi) = Geometry::valid(self.h, self.h, bq, ph);
                for c in 0..self.kw {
                    let (w_lo, w_hi) = Geometry::valid(self.w, self.w, c, pw);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let wv = weight[wbase + (a * self.kh + bq) * self.kw + c];
                    for dd in d_lo..d_hi {
                        let sd = dd + a - pd;
                        for hh in h_lo..h_hi {
                            let sh = hh + bq - ph;
                            let dst = (dd * self.h + hh) * self.w + w_lo;
                            let src = (sd * self.h + sh) * self.w + w_lo + c - pw;
                            f(wv, src, dst, w_hi - w_lo);
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    needs: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = Conv3dGeometry::new(x, weight, None)?;
    let vol = g.vol();
    let taps = g.kd * g.kh * g.kw;
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = needs[1].then(|| vec![T::zero(); weight.len()]);
    let mut db = needs[2].then(|| vec![T::zero(); g.co]);
    for b in 0..g.n {
        for o in 0..g.co {
            let gout = &grad.data()[(b * g.co + o) * vol..(b * g.co + o + 1) * vol];
            if let Some(db) = db.as_mut() {
                db[o] = db[o] + gout.iter().copied().sum::<T>();
            }
            for i in 0..g.ci {
                let xin = &x.data()[(b * g.ci + i) * vol..(b * g.ci + i + 1) * vol];
                let wbase = (o * g.ci + i) * taps;
                let dxs = dx
                    .as_mut()
                    .map(|d| &mut d[(b * g.ci + i) * vol..(b * g.ci + i + 1) * vol]);
                accumulate_3d(&g, wbase, weight.data(), gout, xin, dxs, dw.as_mut());
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(vec![g.co], d)).transpose()?,
    })
}

/// Input and weight gradients of one `(filter, input channel)` pair.
fn accumulate_3d<T: Scalar>(
    g: &Conv3dGeometry,
    wbase: usize,
    weight: &[T],
    gout: &[T],
    xin: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut Vec<T>>,
) {
    let (pd, ph, pw) = ((g.kd - 1) / 2, (g.kh - 1) / 2, (g.kw - 1) / 2);
    for a in 0..g.kd {
        let (d_lo, d_hi) = Geometry::valid(g.d, g.d, a, pd);
        for bq in 0..g.kh {
            let (h_lo, h_hi) = Geometry::valid(g.h, g.h, bq, ph);
            for c in 0..g.kw {
                let (w_lo, w_hi) = Geometry::valid(g.w, g.w, c, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let widx = wbase + (a * g.kh + bq) * g.kw + c;
                let wv = weight[widx];
                let len = w_hi - w_lo;
                let mut acc = T::zero();
                for dd in d_lo..d_hi {
                    let sd = dd + a - pd;
                    for hh in h_lo..h_hi {
                        let sh = hh + bq - ph;
                        let dst = (dd * g.h + hh) * g.w + w_lo;
                        let src = (sd * g.h + sh) * g.w + w_lo + c - pw;
                        let go = &gout[dst..dst + len];
                        if dw.is_some() {
                            acc = acc + dot(go, &xin[src..src + len]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (t, &p) in dx[src..src + len].iter_mut().zip(go) {
                                *t = *t + wv * p;
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums, which lets the
/// compiler vectorize it.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let tail: T = ra.iter().zip(rb).map(|(&p, &q)| p * q).sum();
    lanes.iter().copied().sum::<T>() + tail
}

fn bias_of<T: Scalar>(g: &Graph<T>, bias: Option<Var>) -> Option<&Tensor<T>> {
    bias.map(|b| g.value(b))
}

fn parents(x: Var, w: Var, b: Option<Var>) -> Vec<Var> {
    let mut p = vec![x, w];
    p.extend(b);
    p
}

fn pack_grads<T>(grads: ConvGrads<T>, has_bias: bool) -> Vec<Option<Tensor<T>>> {
    let mut out = vec![grads.input, grads.weight];
    if has_bias {
        out.push(grads.bias);
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let value = conv2d(self.value(x), self.value(weight), bias_of(self, bias), padding)?;
        let has_bias = bias.is_some();
        Ok(self.apply(
            value,
            &parents(x, weight, bias),
            Box::new(move |ctx| {
                let needs = [ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]];
                let grads = conv2d_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, padding, needs)?;
                Ok(pack_grads(grads, has_bias))
            }),
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let value = conv_transpose2d(self.value(x), self.value(weight), bias_of(self, bias), padding)?;
        let has_bias = bias.is_some();
        let k = self.shape(weight)[2];
        let conv_pad = k - 1 - padding;
        Ok(self.apply(
            value,
            &parents(x, weight, bias),
            Box::new(move |ctx| {
                let needs = [ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]];
                let flipped = transpose_kernel(ctx.inputs[1])?;
                let mut grads = conv2d_backward(ctx.inputs[0], &flipped, ctx.grad, conv_pad, needs)?;
                // The flip is an involution up to the channel swap, so applying
                // it to the gradient maps it back to (C_in, C_out, K, K).
                grads.weight = grads.weight.map(|w| transpose_kernel(&w)).transpose()?;
                Ok(pack_grads(grads, has_bias))
            }),
        ))
    }

    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = conv3d(self.value(x), self.value(weight), bias_of(self, bias))?;
        let has_bias = bias.is_some();
        Ok(self.apply(
            value,
            &parents(x, weight, bias),
            Box::new(move |ctx| {
                let needs = [ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]];
                let grads = conv3d_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, needs)?;
                Ok(pack_grads(grads, has_bias))
            }),
        ))
    }
}
