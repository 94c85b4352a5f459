//! Convolution oracles, layer shapes and finite-difference gradient checks for
//! every primitive.

use latentbridge::nn::{
    conv2d, conv3d, conv_transpose2d, grad_check, Activation, ConvParams, GradCheckOptions,
    Graph, LayerConfig, Norm, NormParams, PackParams, ResidualParams, Var,
};
use latentbridge::nn::layers::{pack_param_shapes, residual_param_shapes, unpack_param_shapes};
use latentbridge::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Sliding-window oracle: out[n,o,y,x] = b[o] + Σ w[o,c,i,j]·x[n,c,y+i−p,x+j−p].
fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = vec![0.0; n * co * oh * ow];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = y as isize + i as isize - pad as isize;
                                let ix = xx as isize + j as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * c + ci) * k + i) * k + j]
                                    * x.data()[((bn * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((bn * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Scatter oracle: every input pixel spreads through the kernel into the output.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (_, co, k, _) = w.dims4().unwrap();
    let (oh, ow) = (h + k - 1 - 2 * pad, wd + k - 1 - 2 * pad);
    let mut out = vec![0.0; n * co * oh * ow];
    for bn in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((bn * ci + c) * h + y) * wd + xx];
                    for o in 0..co {
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y + i) as isize - pad as isize;
                                let ox = (xx + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bn * co + o) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.data()[((c * co + o) * k + i) * k + j];
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, ci, d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (co, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (pd, ph, pw) = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; n * co * d * h * wd];
    for bn in 0..n {
        for o in 0..co {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let iz = z as isize + a as isize - pd as isize;
                                        let iy = y as isize + b as isize - ph as isize;
                                        let ix = xx as isize + e as isize - pw as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += w.data()[(((o * ci + c) * kd + a) * kh + b) * kw + e]
                                            * x.data()[(((bn * ci + c) * d + iz) * h + iy) * wd + ix];
                                    }
                                }
                            }
                        }
                        out[(((bn * co + o) * d + z) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn scalar_convolution_multiplies() {
    let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[3.0]).unwrap();
    let w = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[-2.5]).unwrap();
    let b = Tensor::<f64>::zeros(&[1]);
    assert_eq!(conv2d(&x, &w, Some(&b), 0).unwrap().data(), &[-7.5]);
}

#[test]
fn delta_kernel_is_identity() {
    let x = randn(&[2, 3, 5, 5], 1);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    let y = conv2d(&x, &w, None, 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let x = randn(&[1, 2, 5, 5], 2);
    let w = randn(&[4, 2, 3, 3], 3);
    let b = randn(&[4], 4);
    let y = conv2d(&x, &w, Some(&b), 1).unwrap();
    assert_eq!(y.shape(), &[1, 4, 5, 5]);
    assert_close(y.data(), &conv2d_oracle(&x, &w, &b, 1), 1e-12);

    let x = randn(&[2, 3, 6, 4], 5);
    let w = randn(&[2, 3, 7, 7], 6);
    let b = randn(&[2], 7);
    let y = conv2d(&x, &w, Some(&b), 3).unwrap();
    assert_close(y.data(), &conv2d_oracle(&x, &w, &b, 3), 1e-12);
}

#[test]
fn banded_lowering_matches_oracle() {
    // 64·7·7 column rows over 100×100 outputs exceed the column budget.
    let x = randn(&[1, 64, 100, 100], 12);
    let w = randn(&[2, 64, 7, 7], 13);
    let b = randn(&[2], 14);
    let y = conv2d(&x, &w, Some(&b), 3).unwrap();
    assert_close(y.data(), &conv2d_oracle(&x, &w, &b, 3), 1e-9);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    for (k, pad, h) in [(3, 1, 4), (7, 3, 5), (3, 0, 3)] {
        let x = randn(&[2, 3, h, h], 8);
        let w = randn(&[3, 2, k, k], 9);
        let y = conv_transpose2d(&x, &w, None, pad).unwrap();
        let (shape, want) = conv_transpose_oracle(&x, &w, pad);
        assert_eq!(y.shape(), &shape[..]);
        assert_close(y.data(), &want, 1e-12);
    }
}

#[test]
fn conv3d_matches_oracle_with_even_depth_kernel() {
    let x = randn(&[2, 1, 8, 3, 4], 10);
    let w = randn(&[2, 1, 4, 3, 3], 11);
    let y = conv3d(&x, &w, None).unwrap();
    assert_eq!(y.shape(), &[2, 2, 8, 3, 4]);
    assert_close(y.data(), &conv3d_oracle(&x, &w), 1e-12);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let w = Tensor::<f64>::zeros(&[3, 5, 3, 3]);
    assert!(matches!(
        conv2d(&x, &w, None, 1),
        Err(latentbridge::Error::Dimension(_))
    ));
}

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> latentbridge::Result<Var>,
) {
    // Projecting onto fixed random weights makes every output element matter.
    let report = grad_check(f, &inputs, &GradCheckOptions::default()).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.passes(PRIMITIVE_TOL),
        "{name}: rel err {} at input {} element {} (analytic {}, numeric {})",
        report.max_rel_err,
        worst.input,
        worst.index,
        worst.analytic,
        worst.numeric
    );
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> latentbridge::Result<Var> {
    let w = randn(g.shape(y), seed);
    g.dot_const(y, &w)
}

#[test]
fn gradients_of_convolutions() {
    check(
        "conv2d",
        vec![randn(&[2, 2, 4, 4], 1), randn(&[3, 2, 3, 3], 2), randn(&[3], 3)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1)?;
            project(g, y, 100)
        },
    );
    check(
        "conv2d 1x1",
        vec![randn(&[2, 3, 2, 2], 4), randn(&[2, 3, 1, 1], 5)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 0)?;
            project(g, y, 101)
        },
    );
    check(
        "conv_transpose2d",
        vec![randn(&[1, 2, 3, 3], 6), randn(&[2, 3, 3, 3], 7), randn(&[3], 8)],
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 1)?;
            project(g, y, 102)
        },
    );
    check(
        "conv_transpose2d k7",
        vec![randn(&[1, 2, 4, 4], 9), randn(&[2, 1, 7, 7], 10)],
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], None, 3)?;
            project(g, y, 103)
        },
    );
    check(
        "conv3d",
        vec![randn(&[2, 1, 4, 3, 3], 11), randn(&[2, 1, 4, 3, 3], 12), randn(&[2], 13)],
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]))?;
            project(g, y, 104)
        },
    );
}

#[test]
fn gradients_of_norms_and_activations() {
    check("instance_norm", vec![randn(&[2, 3, 3, 3], 20)], |g, v| {
        let y = g.instance_norm(v[0])?;
        project(g, y, 200)
    });
    check(
        "batch_norm",
        vec![randn(&[3, 2, 2, 2], 21), randn(&[2], 22), randn(&[2], 23)],
        |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2])?;
            project(g, y, 201)
        },
    );
    // Keep inputs away from the kinks of relu / leaky relu.
    let away = randn(&[2, 2, 3, 3], 24).map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    check("relu", vec![away.clone()], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 202)
    });
    check("leaky_relu", vec![away.clone()], |g, v| {
        let y = g.activate(v[0], Activation::LeakyRelu);
        project(g, y, 203)
    });
    check("tanh", vec![randn(&[2, 2, 3, 3], 25)], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, 204)
    });
    check(
        "reparameterize",
        vec![randn(&[2, 3, 2, 2], 26), randn(&[2, 3, 2, 2], 27)],
        |g, v| {
            let eps = randn(&[2, 3, 2, 2], 28);
            let z = g.reparameterize(v[0], v[1], &eps)?;
            project(g, z, 205)
        },
    );
}

#[test]
fn gradients_of_pixel_shuffles() {
    check("space2depth", vec![randn(&[1, 2, 4, 4], 30)], |g, v| {
        let y = g.space2depth(v[0], 2)?;
        project(g, y, 300)
    });
    check("depth2space", vec![randn(&[1, 8, 2, 2], 31)], |g, v| {
        let y = g.depth2space(v[0], 2)?;
        project(g, y, 301)
    });
}

fn params_for(shapes: &[(&str, Vec<usize>)], seed: u64) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, (_, s))| Tensor::randn(s, 0.5, &mut rng(seed + i as u64)))
        .collect()
}

fn conv(v: &[Var], w: usize) -> ConvParams {
    ConvParams {
        weight: v[w],
        bias: Some(v[w + 1]),
    }
}

/// Looks up `<prefix>.weight` / `<prefix>.bias` in a shape list whose entries
/// line up with `vars` (offset by `skip` leading inputs).
fn named(shapes: &[(&str, Vec<usize>)], vars: &[Var], skip: usize, prefix: &str) -> ConvParams {
    let find = |suffix: &str| {
        shapes
            .iter()
            .position(|(n, _)| *n == format!("{prefix}.{suffix}"))
            .map(|i| vars[skip + i])
    };
    ConvParams {
        weight: find("weight").expect("weight present"),
        bias: find("bias"),
    }
}

#[test]
fn pack_layer_gradient_matches_finite_differences() {
    let cfg = LayerConfig::new(3, 2, 3);
    let shapes = pack_param_shapes(&cfg);
    let mut inputs = vec![randn(&[2, 2, 4, 4], 40)];
    inputs.extend(params_for(&shapes, 41));
    check("pack_layer", inputs, |g, v| {
        let p = PackParams {
            conv3d: named(&shapes, v, 1, "conv3d"),
            conv: named(&shapes, v, 1, "conv"),
        };
        let y = g.pack_layer(v[0], p, &cfg)?;
        assert_eq!(g.shape(y), &[2, 3, 2, 2]);
        project(g, y, 400)
    });
}

#[test]
fn unpack_layer_gradient_matches_finite_differences() {
    let cfg = LayerConfig::new(3, 3, 2);
    let shapes = unpack_param_shapes(&cfg).unwrap();
    let mut inputs = vec![randn(&[2, 3, 2, 2], 50)];
    inputs.extend(params_for(&shapes, 51));
    check("unpack_layer", inputs, |g, v| {
        let p = PackParams {
            conv: named(&shapes, v, 1, "conv"),
            conv3d: named(&shapes, v, 1, "conv3d"),
        };
        let y = g.unpack_layer(v[0], p, &cfg)?;
        assert_eq!(g.shape(y), &[2, 2, 4, 4]);
        project(g, y, 500)
    });
}

#[test]
fn residual_and_batch_norm_block_gradients() {
    let cfg = LayerConfig::new(3, 2, 2);
    let shapes = residual_param_shapes(&cfg);
    let mut inputs = vec![randn(&[2, 2, 3, 3], 60)];
    inputs.extend(params_for(&shapes, 61));
    check("residual_block", inputs, |g, v| {
        let p = ResidualParams {
            conv1: named(&shapes, v, 1, "conv1"),
            conv2: named(&shapes, v, 1, "conv2"),
        };
        let y = g.residual_block(v[0], p, &cfg, true)?;
        project(g, y, 600)
    });

    let bn = LayerConfig::new(3, 2, 3).with_norm(Norm::Batch);
    check(
        "conv + batch norm + relu",
        vec![
            randn(&[2, 2, 2, 2], 62),
            randn(&[3, 2, 3, 3], 63),
            randn(&[3], 64),
            randn(&[3], 65),
            randn(&[3], 66),
        ],
        |g, v| {
            let y = g.conv_block(
                v[0],
                conv(v, 1),
                Some(NormParams {
                    gamma: v[3],
                    beta: v[4],
                }),
                &bn,
            )?;
            project(g, y, 601)
        },
    );
}

fn forward_shape(cfg: &LayerConfig, input: &[usize], unpack: bool) -> Vec<usize> {
    let mut g = Graph::<f32>::inference();
    let shapes = if unpack {
        unpack_param_shapes(cfg).unwrap()
    } else {
        pack_param_shapes(cfg)
    };
    let vars: Vec<Var> = shapes
        .iter()
        .map(|(_, s)| g.constant(Tensor::full(s, 0.01)))
        .collect();
    let x = g.constant(Tensor::full(input, 0.5));
    let p = PackParams {
        conv: named(&shapes, &vars, 0, "conv"),
        conv3d: named(&shapes, &vars, 0, "conv3d"),
    };
    let y = if unpack {
        g.unpack_layer(x, p, cfg).unwrap()
    } else {
        g.pack_layer(x, p, cfg).unwrap()
    };
    g.shape(y).to_vec()
}

#[test]
fn table_rows_pack_and_unpack_shapes() {
    // Encoder row 2 (64 → 76 at 128²) and row 5 (100 → 128 at 16²).
    assert_eq!(
        forward_shape(&LayerConfig::new(3, 64, 76), &[1, 64, 256, 256], false),
        vec![1, 76, 128, 128]
    );
    assert_eq!(
        forward_shape(&LayerConfig::new(3, 100, 128), &[1, 100, 32, 32], false),
        vec![1, 128, 16, 16]
    );
    // Decoder row 15 (200 → 128) and row 19 (76 → 64 at 256²).
    assert_eq!(
        forward_shape(&LayerConfig::new(3, 200, 128), &[1, 200, 8, 8], true),
        vec![1, 128, 16, 16]
    );
    assert_eq!(
        forward_shape(&LayerConfig::new(3, 76, 64), &[1, 76, 128, 128], true),
        vec![1, 64, 256, 256]
    );
}

#[test]
fn forward_passes_are_bitwise_deterministic() {
    let cfg = LayerConfig::new(3, 2, 3);
    let shapes = pack_param_shapes(&cfg);
    let params = params_for(&shapes, 70);
    let x = randn(&[2, 2, 8, 8], 71);
    let run = || {
        let mut g = Graph::<f64>::inference();
        let v: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
        let xv = g.constant(x.clone());
        let p = PackParams {
            conv3d: named(&shapes, &v, 0, "conv3d"),
            conv: named(&shapes, &v, 0, "conv"),
        };
        let y = g.pack_layer(xv, p, &cfg).unwrap();
        g.value(y).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn pack_rejects_indivisible_input() {
    let cfg = LayerConfig::new(3, 1, 2);
    let mut g = Graph::<f64>::inference();
    let shapes = pack_param_shapes(&cfg);
    let vars: Vec<Var> = shapes
        .iter()
        .map(|(_, s)| g.constant(Tensor::zeros(s)))
        .collect();
    let x = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let p = PackParams {
        conv3d: named(&shapes, &vars, 0, "conv3d"),
        conv: named(&shapes, &vars, 0, "conv"),
    };
    assert!(g.pack_layer(x, p, &cfg).is_err());
}
