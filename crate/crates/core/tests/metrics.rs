mod common;

use common::oracle::{level, oracle_dataset, oracle_model, oracle_sample, D_MAX, D_MIN};
use latentbridge::data::MemoryDataset;
use latentbridge::error::Error;
use latentbridge::labels::{LabelMap, IGNORE};
use latentbridge::metrics::*;
use latentbridge::model::Domain;
use latentbridge::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(vec![v.len()], v).unwrap()
}

fn lm(v: &[u8]) -> LabelMap {
    LabelMap::new([1, 1, v.len()], v.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn depth_metrics_vanish_when_prediction_is_exact() {
    let gt = t(&[1.5, 7.0, 30.0, 79.0]);
    let m = depth_metrics(&gt, &gt, None, D_MIN, D_MAX).unwrap();
    assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.log_rmse), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn depth_metrics_hand_example() {
    let m = depth_metrics(&t(&[2.0, 2.0]), &t(&[1.0, 4.0]), None, D_MIN, D_MAX).unwrap();
    // |1-2|/1 = 1 and |4-2|/4 = 0.5; squares 1/1 and 4/4; mean squared error 2.5.
    assert!(close(m.abs_rel, 0.75, 1e-9));
    assert!(close(m.sq_rel, 1.0, 1e-9));
    assert!(close(m.rmse, 2.5f64.sqrt(), 1e-9));
    assert!(close(m.rmse, 1.58114, 1e-5));
    assert!(close(m.log_rmse, 2f64.ln(), 1e-9));
    assert!(close(m.log_rmse, 0.69315, 1e-5));
}

#[test]
fn depth_metrics_clamp_predictions_to_the_range() {
    // -5 clamps to 1 and 500 to 80.
    let m = depth_metrics(&t(&[-5.0, 500.0]), &t(&[1.0, 80.0]), None, D_MIN, D_MAX).unwrap();
    assert_eq!(m.rmse, 0.0);
    assert_eq!(m.log_rmse, 0.0);
}

#[test]
fn depth_metrics_skip_invalid_pixels() {
    let pred = t(&[2.0, 2.0, 9.0, 9.0]);
    let gt = t(&[1.0, 4.0, 0.0, 3.0]);
    let mask = [true, true, true, false];
    let m = depth_metrics(&pred, &gt, Some(&mask), D_MIN, D_MAX).unwrap();
    assert!(close(m.abs_rel, 0.75, 1e-12));
}

#[test]
fn depth_metrics_reject_an_empty_valid_set() {
    let err = depth_metrics(&t(&[2.0, 3.0]), &t(&[0.0, 0.0]), None, D_MIN, D_MAX).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
    let err = depth_metrics(&t(&[2.0]), &t(&[5.0]), Some(&[false]), D_MIN, D_MAX).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
}

#[test]
fn depth_metrics_reject_shape_mismatch() {
    assert!(depth_metrics(&t(&[2.0]), &t(&[1.0, 4.0]), None, D_MIN, D_MAX).is_err());
}

proptest! {
    #[test]
    fn depth_metrics_are_homogeneous(
        pairs in prop::collection::vec((0.5f64..50.0, 0.5f64..50.0), 1..40),
        lambda in 0.1f64..10.0,
    ) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        // A range wide enough that no clamping happens at either scale.
        let (lo, hi) = (1e-3, 1e6);
        let a = depth_metrics(&t(&p), &t(&g), None, lo, hi).unwrap();
        let ps: Vec<f64> = p.iter().map(|v| v * lambda).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * lambda).collect();
        let b = depth_metrics(&t(&ps), &t(&gs), None, lo, hi).unwrap();
        let tol = |x: f64| 1e-9 * (1.0 + x.abs());
        prop_assert!(close(b.abs_rel, a.abs_rel, tol(a.abs_rel)));
        prop_assert!(close(b.log_rmse, a.log_rmse, tol(a.log_rmse)));
        prop_assert!(close(b.rmse, lambda * a.rmse, tol(lambda * a.rmse)));
        prop_assert!(close(b.sq_rel, lambda * a.sq_rel, tol(lambda * a.sq_rel)));
    }

    #[test]
    fn depth_metrics_are_non_negative(
        pairs in prop::collection::vec((-10.0f64..100.0, 0.1f64..100.0), 1..40),
    ) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = depth_metrics(&t(&p), &t(&g), None, D_MIN, D_MAX).unwrap();
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.log_rmse >= 0.0);
    }
}

#[test]
fn segmentation_perfect_prediction() {
    let gt = lm(&[0, 1, 1, 0, 1]);
    let m = segmentation_metrics(&gt, &gt, IGNORE, 4).unwrap();
    assert_eq!((m.miou, m.pixel_accuracy), (1.0, 1.0));
}

#[test]
fn segmentation_hand_example() {
    let gt = lm(&[0, 0, 1, 1]);
    let pred = lm(&[0, 0, 0, 0]);
    let m = segmentation_metrics(&pred, &gt, IGNORE, 2).unwrap();
    // IoU0 = 2 / 4, IoU1 = 0 / 2.
    assert_eq!(m.pixel_accuracy, 0.5);
    assert_eq!(m.miou, 0.25);
}

#[test]
fn segmentation_excludes_ignored_ground_truth() {
    let gt = lm(&[0, IGNORE, 1, IGNORE]);
    let pred = lm(&[0, 1, 1, 0]);
    let m = segmentation_metrics(&pred, &gt, IGNORE, 2).unwrap();
    assert_eq!((m.miou, m.pixel_accuracy), (1.0, 1.0));
}

#[test]
fn segmentation_counts_predicted_ignore_as_wrong() {
    let gt = lm(&[0, 1]);
    let pred = lm(&[0, IGNORE]);
    let m = segmentation_metrics(&pred, &gt, IGNORE, 2).unwrap();
    assert_eq!(m.pixel_accuracy, 0.5);
    assert_eq!(m.miou, 0.5);
}

#[test]
fn segmentation_errors() {
    let all_ignored = lm(&[IGNORE, IGNORE]);
    let err = segmentation_metrics(&lm(&[0, 1]), &all_ignored, IGNORE, 2).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
    let err = segmentation_metrics(&lm(&[0, 5]), &lm(&[0, 1]), IGNORE, 2).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let err = segmentation_metrics(&lm(&[0]), &lm(&[0, 1]), IGNORE, 2).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}

/// Per-class pixel sets, intersected and united.
fn set_oracle(pred: &[u8], gt: &[u8], classes: u8) -> (f64, f64) {
    use std::collections::BTreeSet;
    let kept: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE).collect();
    let correct = kept.iter().filter(|&&i| pred[i] == gt[i]).count();
    let mut ious = Vec::new();
    for c in 0..classes {
        let g: BTreeSet<usize> = kept.iter().copied().filter(|&i| gt[i] == c).collect();
        let p: BTreeSet<usize> = kept.iter().copied().filter(|&i| pred[i] == c).collect();
        let union = g.union(&p).count();
        if union > 0 {
            ious.push(g.intersection(&p).count() as f64 / union as f64);
        }
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, correct as f64 / kept.len() as f64)
}

#[test]
fn segmentation_matches_set_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let classes = 4u8;
    let mut checked = 0;
    while checked < 1000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..64)
                .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..classes) })
                .collect()
        };
        let gt = draw(&mut rng);
        let pred = draw(&mut rng);
        if gt.iter().all(|&v| v == IGNORE) {
            continue;
        }
        let m = segmentation_metrics(
            &LabelMap::new([1, 8, 8], pred.clone()).unwrap(),
            &LabelMap::new([1, 8, 8], gt.clone()).unwrap(),
            IGNORE,
            classes as usize,
        )
        .unwrap();
        let (miou, acc) = set_oracle(&pred, &gt, classes);
        assert_eq!(m.miou, miou, "instance {checked}");
        assert_eq!(m.pixel_accuracy, acc, "instance {checked}");
        checked += 1;
    }
}

proptest! {
    #[test]
    fn fixing_a_pixel_never_lowers_accuracy(
        gt in prop::collection::vec(0u8..4, 1..64),
        pred in prop::collection::vec(0u8..4, 64),
        pick in any::<prop::sample::Index>(),
    ) {
        let pred = pred[..gt.len()].to_vec();
        let i = pick.index(gt.len());
        let mut fixed = pred.clone();
        fixed[i] = gt[i];
        let a = segmentation_metrics(&lm(&pred), &lm(&gt), IGNORE, 4).unwrap();
        let b = segmentation_metrics(&lm(&fixed), &lm(&gt), IGNORE, 4).unwrap();
        prop_assert!(b.pixel_accuracy >= a.pixel_accuracy);
        prop_assert!((0.0..=1.0).contains(&b.miou));
    }
}

#[test]
fn nearest_resize_same_size_is_identity() {
    let v: Vec<u8> = (0..12).collect();
    assert_eq!(resize_nearest(&v, (3, 4), (3, 4)), v);
}

#[test]
fn nearest_resize_replicates_blocks() {
    let v = [1u8, 2, 3, 4];
    assert_eq!(
        resize_nearest(&v, (2, 2), (4, 4)),
        vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
    );
    assert_eq!(resize_nearest(&[1u8, 2, 3, 4, 5, 6, 7, 8], (1, 8), (1, 4)), vec![2, 4, 6, 8]);
}

#[test]
fn bilinear_resize_hand_values() {
    // Half-pixel centers: output x maps to source (x + 0.5) / 2 − 0.5.
    let (out, ok) = resize_bilinear(&[0.0, 4.0], (1, 2), (1, 4), None);
    assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    assert!(ok.iter().all(|&b| b));
    let (same, _) = resize_bilinear(&[1.0, 2.0, 3.0, 4.0], (2, 2), (2, 2), None);
    assert_eq!(same, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn bilinear_resize_drops_invalid_taps() {
    let (out, ok) = resize_bilinear(&[0.0, 4.0], (1, 2), (1, 4), Some(&[false, true]));
    assert_eq!(out, vec![0.0, 4.0, 4.0, 4.0]);
    assert_eq!(ok, vec![false, true, true, true]);
}

#[test]
fn bilinear_resize_preserves_constants() {
    let (out, _) = resize_bilinear(&[3.5; 9], (3, 3), (7, 5), None);
    assert!(out.iter().all(|&v| close(v, 3.5, 1e-12)));
}

#[test]
fn oracle_model_scores_perfectly() {
    let data = oracle_dataset(8, 3, 1);
    let model = oracle_model(8);
    for resize in [Resize::Native, Resize::Square(256)] {
        let opts = EvalOptions {
            task: Task::Both,
            resize,
            domain: Domain::Real,
        };
        let r = evaluate_model(&model, &data, &opts).unwrap();
        assert_eq!(r.n_images, 3);
        for v in [r.abs_rel, r.sq_rel, r.rmse, r.log_rmse] {
            assert!(v.unwrap() < 1e-9, "{r:?}");
        }
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.pixel_accuracy, Some(1.0));
    }
}

#[test]
fn report_counts_every_image() {
    let data = oracle_dataset(8, 5, 2);
    let opts = EvalOptions {
        task: Task::Depth,
        resize: Resize::Native,
        domain: Domain::Sim,
    };
    let r = evaluate_model(&oracle_model(8), &data, &opts).unwrap();
    assert_eq!(r.n_images, 5);
    assert!(r.miou.is_none() && r.cross_entropy.is_none());
}

#[test]
fn metrics_are_averaged_per_image_not_pooled() {
    let n = 4;
    let far = level(100);
    let near = level(20);
    // Image a: every pixel predicted at `far` against truth `near`.
    let a = oracle_sample(n, &[far; 16], &[near; 16], &[0; 16], Domain::Real);
    // Image b: exact on its single valid pixel; the rest have no depth.
    let mut gt_b = [0.0; 16];
    gt_b[0] = near;
    let b = oracle_sample(n, &[near; 16], &gt_b, &[1; 16], Domain::Real);
    let data = MemoryDataset {
        sim: Vec::new(),
        real: vec![a, b],
        d_min: D_MIN,
        d_max: D_MAX,
    };
    let opts = EvalOptions {
        task: Task::Depth,
        resize: Resize::Native,
        domain: Domain::Real,
    };
    let r = evaluate_model(&oracle_model(n), &data, &opts).unwrap();
    let per_pixel = (far - near).abs() / near;
    let per_image = (per_pixel + 0.0) / 2.0;
    let pooled = 16.0 * per_pixel / 17.0;
    assert!((per_image - pooled).abs() > 0.01);
    assert!(close(r.abs_rel.unwrap(), per_image, 1e-9), "{r:?}");
    assert!(close(r.rmse.unwrap(), (far - near).abs() / 2.0, 1e-9), "{r:?}");
}

#[test]
fn dataset_of_identical_images_matches_one_image() {
    let one = oracle_sample(4, &[level(40); 16], &[level(60); 16], &[1; 16], Domain::Real);
    let opts = EvalOptions {
        task: Task::Both,
        resize: Resize::Square(12),
        domain: Domain::Real,
    };
    let single = MemoryDataset {
        sim: Vec::new(),
        real: vec![one.clone()],
        d_min: D_MIN,
        d_max: D_MAX,
    };
    let many = MemoryDataset {
        real: vec![one; 4],
        ..single.clone()
    };
    let model = oracle_model(4);
    let a = evaluate_model(&model, &single, &opts).unwrap();
    let b = evaluate_model(&model, &many, &opts).unwrap();
    assert_eq!(MetricReport { n_images: 4, ..a }, b);
}

#[test]
fn evaluation_requires_images_and_ground_truth() {
    let mut data = oracle_dataset(8, 2, 3);
    let model = oracle_model(8);
    let opts = EvalOptions::default();
    for s in &mut data.real {
        s.labels = None;
    }
    let err = evaluate_model(&model, &data, &EvalOptions { task: Task::Seg, ..opts }).unwrap_err();
    assert!(err.to_string().contains("no segmentation ground truth"), "{err}");
    data.real.clear();
    let err = evaluate_model(&model, &data, &opts).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
}

#[test]
fn cross_entropy_is_reported_for_segmentation() {
    let data = oracle_dataset(8, 2, 4);
    let opts = EvalOptions {
        task: Task::Seg,
        resize: Resize::Native,
        domain: Domain::Real,
    };
    let r = evaluate_model(&oracle_model(8), &data, &opts).unwrap();
    // Logits (1, −1) on every pixel: CE = ln(1 + e^−2).
    assert!(close(r.cross_entropy.unwrap(), (1.0 + (-2f64).exp()).ln(), 1e-12));
}

#[test]
fn report_serializes_every_field() {
    let mut r = MetricReport {
        n_images: 3,
        ..MetricReport::default()
    };
    r.set_depth(DepthMetrics {
        abs_rel: 0.5,
        sq_rel: 1.25,
        rmse: 2.0,
        log_rmse: 0.25,
    });
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    for key in ["abs_rel", "sq_rel", "rmse", "log_rmse", "miou", "pixel_accuracy", "n_images"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["miou"], serde_json::Value::Null);
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "abs_rel,sq_rel,rmse,log_rmse,miou,pixel_accuracy,cross_entropy,n_images"
    );
    assert_eq!(lines.next().unwrap(), "0.5,1.25,2,0.25,,,,3");
    let back: MetricReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

#[test]
fn task_and_resize_parse() {
    assert_eq!("seg".parse::<Task>().unwrap(), Task::Seg);
    assert!("pose".parse::<Task>().is_err());
    assert_eq!("native".parse::<Resize>().unwrap(), Resize::Native);
    assert_eq!("256".parse::<Resize>().unwrap(), Resize::Square(256));
    assert!("0".parse::<Resize>().is_err());
}
