use latentbridge::model::checkpoint::{decode_checkpoint, encode_checkpoint, VERSION};
use latentbridge::model::{
    cross_domain, decode, encode, latent_noise, load_checkpoint, load_into, save_checkpoint,
    shape_trace, ArchConfig, Binder, Domain, EncodeMode, Group, Head, ModelBundle,
};
use latentbridge::nn::Graph;
use latentbridge::train::AdamState;
use latentbridge::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn desk32() -> ModelBundle<f64> {
    ModelBundle::build(&ArchConfig::desk(32), 7).unwrap()
}

fn images(arch: &ArchConfig, n: usize, seed: u64) -> Tensor<f64> {
    let s = arch.image_size;
    Tensor::uniform(&[n, arch.image_channels, s, s], -1.0, 1.0, &mut rng(seed))
}

#[test]
fn same_seed_builds_identical_models() {
    let a = desk32();
    let b = desk32();
    assert!(a.bitwise_eq(&b));
    let c = ModelBundle::<f64>::build(&ArchConfig::desk(32), 8).unwrap();
    assert!(!a.bitwise_eq(&c));
}

#[test]
fn initialization_statistics() {
    let m = ModelBundle::<f64>::build(&ArchConfig::paper_256(), 1).unwrap();
    let mut weights = Vec::new();
    for (name, t) in m.params() {
        if name.ends_with(".weight") {
            weights.extend_from_slice(t.data());
        } else if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-4, "mean {mean}");
    assert!((std - 0.02).abs() < 1e-4, "std {std}");
}

#[test]
fn shared_blocks_alias_one_storage() {
    let mut m = desk32();
    for (a, b) in [
        ("enc_r.latent.weight", "enc_s.latent.weight"),
        ("enc_r.mu.bias", "enc_s.mu.bias"),
        ("dec_r.entry.weight", "dec_s.entry.weight"),
        ("dec_r.entry.bn.gamma", "shared_dec.entry.bn.gamma"),
    ] {
        assert!(m.same_storage(a, b), "{a} / {b}");
    }
    assert!(!m.same_storage("enc_r.stem.weight", "enc_s.stem.weight"));
    assert!(!m.same_storage("dec_r.b0.conv.weight", "dec_s.b0.conv.weight"));

    m.get_mut("enc_r.latent.weight").unwrap().data_mut()[0] = 42.0;
    assert_eq!(m.get("enc_s.latent.weight").unwrap().data()[0], 42.0);
    assert_eq!(m.get("shared_enc.latent.weight").unwrap().data()[0], 42.0);
}

#[test]
fn auxiliary_decoders_are_never_aliased() {
    for preset in ["desk-32", "paper-256", "paper-256-share3"] {
        let m = ModelBundle::<f32>::zeros(&ArchConfig::preset(preset).unwrap()).unwrap();
        for (alias, canonical) in m.sharing_map() {
            for side in [&alias, &canonical] {
                assert!(
                    !side.starts_with("dec_depth") && !side.starts_with("dec_seg"),
                    "{preset}: {alias} -> {canonical}"
                );
            }
        }
        assert!(m.group_parameters(Group::DecDepth) > 0);
        assert!(m.group_parameters(Group::DecSeg) > 0);
    }
}

#[test]
fn share3_extends_sharing_by_two_blocks_per_side() {
    let m = ModelBundle::<f32>::zeros(&ArchConfig::preset("paper-256-share3").unwrap()).unwrap();
    // Encoder blocks 6 and 7 (rows 8 and 9) and decoder blocks 0 and 1
    // (rows 12 and 13) join the latent / entry blocks.
    assert!(m.same_storage("enc_r.b7.conv.weight", "enc_s.b7.conv.weight"));
    assert!(m.same_storage("enc_r.b6.conv1.weight", "enc_s.b6.conv1.weight"));
    assert!(!m.same_storage("enc_r.b5.conv1.weight", "enc_s.b5.conv1.weight"));
    assert!(m.same_storage("dec_r.b1.conv2.weight", "dec_s.b1.conv2.weight"));
    assert!(!m.same_storage("dec_r.b2.conv1.weight", "dec_s.b2.conv1.weight"));
    let default = ModelBundle::<f32>::zeros(&ArchConfig::paper_256()).unwrap();
    assert!(!default.same_storage("enc_r.b7.conv.weight", "enc_s.b7.conv.weight"));
    assert!(m.num_parameters() < default.num_parameters());
}

/// Parameter count of `paper-256` summed block by block over the layer shapes.
fn hand_count_paper_256() -> usize {
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    // Packing: 3D conv (1 filter, kernel 4×3×3, bias) then a bias-free 3×3
    // conv from 4·C_in channels (its InstanceNorm absorbs a bias).
    let conv3d = 4 * 3 * 3 + 1;
    let pack = |cin: usize, cout: usize| conv3d + conv(4 * cin, cout, 3, false);
    let unpack = |cin: usize, cout: usize| conv(cin, 4 * cout, 3, false) + conv3d;
    let residual = |c: usize| 2 * conv(c, c, 3, false);

    // Rows 1–9, one per domain encoder.
    let encoder = conv(3, 64, 7, true)
        + pack(64, 76)
        + pack(76, 88)
        + pack(88, 100)
        + pack(100, 128)
        + pack(128, 200)
        + residual(200)
        + residual(200)
        + pack(200, 250);
    // Row 10 (conv + BN scale/shift) and the 1×1 mu / logvar heads.
    let shared_encoder = conv(250, 300, 3, false) + 2 * 300 + 2 * conv(300, 300, 1, true);
    // Row 11: transposed conv + BN.
    let entry = conv(300, 250, 3, false) + 2 * 250;
    // Rows 12–19.
    let body = unpack(250, 200)
        + residual(200)
        + residual(200)
        + unpack(200, 128)
        + unpack(128, 100)
        + unpack(100, 88)
        + unpack(88, 76)
        + unpack(76, 64);
    // Row 20.
    let out = |c: usize| conv(64, c, 7, true);

    2 * encoder + shared_encoder + entry + 2 * (body + out(3)) + (entry + body + out(1)) + (entry + body + out(15))
}

#[test]
fn paper_256_parameter_count_matches_hand_count() {
    let m = ModelBundle::<f32>::zeros(&ArchConfig::paper_256()).unwrap();
    assert_eq!(m.num_parameters(), hand_count_paper_256());
}

#[test]
fn mean_mode_latent_is_mu() {
    let m = desk32();
    let x = images(m.arch(), 2, 1);
    let code = encode(&m, &x, Domain::Real, EncodeMode::Mean, &mut rng(0)).unwrap();
    assert!(code.z.bitwise_eq(&code.mu));
    assert_eq!(code.mu.shape(), &[2, 48, 2, 2]);
    assert_eq!(code.logvar.shape(), code.mu.shape());
}

#[test]
fn sample_mode_is_seeded_and_collapses_at_the_logvar_floor() {
    let mut m = desk32();
    let x = images(m.arch(), 2, 2);
    let a = encode(&m, &x, Domain::Sim, EncodeMode::Sample, &mut rng(5)).unwrap();
    let b = encode(&m, &x, Domain::Sim, EncodeMode::Sample, &mut rng(5)).unwrap();
    assert!(a.z.bitwise_eq(&b.z));
    assert!(!a.z.bitwise_eq(&a.mu));

    // A huge negative logvar is clamped to the floor −10, i.e. std e^−5.
    let w = m.get_mut("enc_s.logvar.weight").unwrap();
    *w = Tensor::zeros(w.shape());
    let bias = m.get_mut("enc_s.logvar.bias").unwrap();
    *bias = Tensor::full(bias.shape(), -1e6);
    let code = encode(&m, &x, Domain::Sim, EncodeMode::Sample, &mut rng(5)).unwrap();
    assert!(code.logvar.data().iter().all(|&v| v == -10.0));
    let eps = latent_noise(&m, 2, &mut rng(5));
    let std = (-5.0f64).exp();
    for ((&z, &mu), &e) in code.z.data().iter().zip(code.mu.data()).zip(eps.data()) {
        assert!((z - mu - std * e).abs() < 1e-15);
        assert!((z - mu).abs() < 0.05);
    }
}

#[test]
fn encode_rejects_wrong_image_shape() {
    let m = desk32();
    let x = Tensor::<f64>::zeros(&[1, 3, 64, 64]);
    let err = encode(&m, &x, Domain::Real, EncodeMode::Mean, &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}

#[test]
fn decoder_heads_have_expected_shapes_and_ranges() {
    let m = desk32();
    let z = Tensor::randn(&[2, 48, 2, 2], 3.0, &mut rng(3));
    for (head, c) in [(Head::Real, 3), (Head::Sim, 3), (Head::Depth, 1), (Head::Seg, 6)] {
        let y = decode(&m, &z, head).unwrap();
        assert_eq!(y.shape(), &[2, c, 32, 32], "{head:?}");
        if head != Head::Seg {
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)), "{head:?}");
        }
    }
    let err = "segmentation".parse::<Head>().unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert!(decode(&m, &Tensor::zeros(&[1, 48, 4, 4]), Head::Real).is_err());
}

#[test]
fn seg_head_emits_unbounded_logits() {
    let mut m = desk32();
    let b = m.get_mut("dec_seg.out.bias").unwrap();
    *b = Tensor::full(b.shape(), 5.0);
    let z = Tensor::randn(&[1, 48, 2, 2], 1.0, &mut rng(3));
    let y = decode(&m, &z, Head::Seg).unwrap();
    assert!(y.data().iter().any(|&v| v > 1.0));
}

#[test]
fn identity_toy_reproduces_inputs_on_every_path() {
    let arch = ArchConfig::identity_toy();
    let mut m = ModelBundle::<f64>::build(&arch, 0).unwrap();
    m.set_identity().unwrap();
    let x = images(&arch, 2, 4);
    for from in [Domain::Real, Domain::Sim] {
        for to in [Domain::Real, Domain::Sim] {
            let y = cross_domain(&m, &x, from, to, EncodeMode::Mean, &mut rng(0)).unwrap();
            assert!(y.bitwise_eq(&x), "{from} -> {to}");
        }
    }
}

#[test]
fn cross_domain_and_cycle_preserve_shape() {
    let m = desk32();
    let x = images(m.arch(), 2, 5);
    for from in [Domain::Real, Domain::Sim] {
        for to in [Domain::Real, Domain::Sim] {
            let y = cross_domain(&m, &x, from, to, EncodeMode::Sample, &mut rng(1)).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }
    let mut r = rng(2);
    let to_sim = cross_domain(&m, &x, Domain::Real, Domain::Sim, EncodeMode::Sample, &mut r).unwrap();
    let back = cross_domain(&m, &to_sim, Domain::Sim, Domain::Real, EncodeMode::Sample, &mut r).unwrap();
    assert_eq!(back.shape(), x.shape());
}

#[test]
fn desk_trace_halves_then_doubles() {
    let m = desk32();
    let x = images(m.arch(), 1, 6);
    let trace = shape_trace(&m, &x, Domain::Real, Head::Depth).unwrap();
    let shapes: Vec<Vec<usize>> = trace.into_iter().map(|(_, s)| s).collect();
    let want: Vec<Vec<usize>> = [
        [8, 32], [12, 16], [16, 8], [24, 4], [24, 4], [32, 2], [48, 2],
        [32, 2], [24, 4], [24, 4], [16, 8], [12, 16], [8, 32], [1, 32],
    ]
    .iter()
    .map(|&[c, s]| vec![1, c, s, s])
    .collect();
    assert_eq!(shapes, want);
}

#[test]
fn aliased_gradients_sum_over_both_domains() {
    let m = desk32();
    let x = images(m.arch(), 2, 8);
    let name = "shared_enc.mu.bias";
    let grad_of = |domains: &[Domain]| {
        let mut g = Graph::<f64>::new();
        let mut b = Binder::all_trainable(&m);
        let xv = g.constant(x.clone());
        let mut terms = Vec::new();
        for &d in domains {
            let l = b.encode(&mut g, xv, d, None).unwrap();
            terms.push(g.sum_all(l.mu));
        }
        let total = if terms.len() == 2 { g.add(terms[0], terms[1]).unwrap() } else { terms[0] };
        let v = b.bound()[name];
        g.backward(total).unwrap().take(v).unwrap()
    };
    let r = grad_of(&[Domain::Real]);
    let s = grad_of(&[Domain::Sim]);
    let both = grad_of(&[Domain::Real, Domain::Sim]);
    for ((&a, &b), &c) in r.data().iter().zip(s.data()).zip(both.data()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

#[test]
fn swapped_model_exchanges_domain_networks() {
    let m = desk32();
    let s = m.with_domains_swapped();
    assert!(s.get("enc_r.stem.weight").unwrap().bitwise_eq(m.get("enc_s.stem.weight").unwrap()));
    assert!(s.get("dec_s.out.weight").unwrap().bitwise_eq(m.get("dec_r.out.weight").unwrap()));
    assert!(s.get("shared_enc.mu.weight").unwrap().bitwise_eq(m.get("shared_enc.mu.weight").unwrap()));
    assert!(s.with_domains_swapped().bitwise_eq(&m));
}

fn optimizer_state(m: &ModelBundle<f64>) -> AdamState<f64> {
    let mut st = AdamState::new();
    st.step = 3;
    st.skipped = 1;
    for (i, (name, t)) in m.params().iter().take(5).enumerate() {
        st.m.insert(name.clone(), Tensor::randn(t.shape(), 1.0, &mut rng(i as u64)));
        st.v.insert(name.clone(), Tensor::uniform(t.shape(), 0.0, 1.0, &mut rng(i as u64)));
    }
    st
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run/m.ckpt");
    let m = ModelBundle::<f64>::build(&ArchConfig::desk(32).with_share_blocks(2), 11).unwrap();
    let st = optimizer_state(&m);
    let extra = serde_json::json!({"epoch": 4});
    save_checkpoint(&path, &m, Some(&st), &extra).unwrap();
    let ck = load_checkpoint::<f64>(&path).unwrap();
    assert!(ck.model.bitwise_eq(&m));
    assert_eq!(ck.model.arch(), m.arch());
    assert_eq!(ck.model.sharing_map(), m.sharing_map());
    assert!(ck.model.same_storage("enc_r.b4.conv.weight", "enc_s.b4.conv.weight"));
    assert_eq!(ck.optimizer.as_ref(), Some(&st));
    assert_eq!(ck.extra, extra);

    let mut fresh = ModelBundle::<f64>::zeros(m.arch()).unwrap();
    load_into(&mut fresh, &path).unwrap();
    assert!(fresh.bitwise_eq(&m));
}

#[test]
fn f32_checkpoint_roundtrip_is_bitwise() {
    let m = ModelBundle::<f32>::build(&ArchConfig::desk(32), 12).unwrap();
    let bytes = encode_checkpoint(&m, None, &serde_json::Value::Null).unwrap();
    let ck = decode_checkpoint::<f32>(&bytes).unwrap();
    assert!(ck.model.bitwise_eq(&m));
    assert!(ck.optimizer.is_none());
}

#[test]
fn truncated_checkpoint_is_reported_as_corrupt() {
    let m = desk32();
    let bytes = encode_checkpoint(&m, None, &serde_json::Value::Null).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint::<f64>(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::CorruptCheckpoint(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode_checkpoint::<f64>(&longer), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn version_mismatch_is_reported() {
    let m = desk32();
    let mut bytes = encode_checkpoint(&m, None, &serde_json::Value::Null).unwrap();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match decode_checkpoint::<f64>(&bytes) {
        Err(Error::CheckpointVersion { found, expected }) => {
            assert_eq!((found, expected), (VERSION + 1, VERSION));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn loading_another_preset_names_the_mismatched_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    save_checkpoint(&path, &desk32(), None, &serde_json::Value::Null).unwrap();
    let mut paper = ModelBundle::<f64>::zeros(&ArchConfig::paper_256()).unwrap();
    match load_into(&mut paper, &path) {
        Err(Error::ShapeMismatch { name, found, expected }) => {
            assert_eq!(name, "dec_depth.b0.conv.weight");
            assert_ne!(found, expected);
        }
        other => panic!("unexpected {other:?}"),
    }
    let missing = load_checkpoint::<f64>(&dir.path().join("absent.ckpt")).unwrap_err();
    assert!(matches!(missing, Error::MissingFile(_)));
}

#[test]
fn presets_validate_and_report_divisibility() {
    for p in ArchConfig::PRESETS {
        ArchConfig::preset(p).unwrap().validate().unwrap();
    }
    assert!(matches!(ArchConfig::preset("desk-48"), Err(Error::Usage(_))));
    let err = ArchConfig::desk(32).check_image_size(30).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains("32"), "{msg}");
}
