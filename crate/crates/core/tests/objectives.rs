use glims::loss::{combine, deep_supervision, dice_ce, level_weight, LossOptions, LOSS_EPS};
use glims::metrics::{dsc, hd95, percentile95_rank, MetricsReport};
use glims::{Error, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{oracle_boundary, oracle_dsc, oracle_hd95, random_mask};

fn logits(shape: &[usize], data: Vec<f64>) -> Var<f64> {
    Var::constant(Tensor::new(shape, data).unwrap())
}

#[test]
fn uniform_prediction_on_a_single_class_volume() {
    // K = 2, every voxel class 0, p = 0.5 everywhere:
    // dice = 1 - (0.5n / 1.25n + 0) = 0.6, ce = ln 2
    let n = 4 * 4 * 4;
    let x = logits(&[1, 2, 4, 4, 4], vec![0.0; 2 * n]);
    let (loss, parts) = dice_ce(&x, &vec![0u8; n], LossOptions::default()).unwrap();
    let want = 0.6 + std::f64::consts::LN_2;
    assert!((parts.total - want).abs() < 1e-3, "{}", parts.total);
    assert!((parts.dice - 0.6).abs() < 1e-4);
    assert!((parts.ce - std::f64::consts::LN_2).abs() < 1e-4);
    assert_eq!(loss.value().data()[0], parts.total);
}

#[test]
fn confident_correct_prediction_has_near_zero_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (k, n) = (3usize, 2 * 27);
    let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..k as u8)).collect();
    let mut data = vec![0.0; k * n];
    for (i, &l) in labels.iter().enumerate() {
        let (b, v) = (i / 27, i % 27);
        data[(b * k + l as usize) * 27 + v] = 15.0;
    }
    let (_, parts) = dice_ce(&logits(&[2, k, 3, 3, 3], data), &labels, LossOptions::default()).unwrap();
    // log(p + eps) can exceed 0 by at most eps when p is 1
    assert!(parts.total >= -LOSS_EPS && parts.total < 1e-3, "{}", parts.total);
}

#[test]
fn loss_is_non_negative_on_random_logits() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let x: Var<f64> = Var::constant(Tensor::randn(
            &[1, 4, 2, 3, 2],
            3.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        ));
        let labels: Vec<u8> = (0..12).map(|_| r.random_range(0..4)).collect();
        let (_, parts) = dice_ce(&x, &labels, LossOptions::default()).unwrap();
        assert!(parts.dice >= 0.0 && parts.ce >= -LOSS_EPS && parts.total >= -LOSS_EPS);
    }
}

#[test]
fn out_of_range_label_is_an_error() {
    let x = logits(&[1, 2, 1, 1, 2], vec![0.0; 4]);
    let err = dice_ce(&x, &[0, 2], LossOptions::default()).err().unwrap();
    assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
}

#[test]
fn dice_only_and_unnormalised_variants() {
    let n = 8;
    let x = logits(&[1, 2, 2, 2, 2], vec![0.0; 2 * n]);
    let labels = vec![0u8; n];
    let dice_only = LossOptions {
        dice_only: true,
        ..LossOptions::default()
    };
    let (_, p) = dice_ce(&x, &labels, dice_only).unwrap();
    assert!((p.total - 0.6).abs() < 1e-4);
    let raw = LossOptions {
        normalize_ce: false,
        ..LossOptions::default()
    };
    let (_, p) = dice_ce(&x, &labels, raw).unwrap();
    assert!((p.ce - n as f64 * std::f64::consts::LN_2).abs() < 1e-3);
}

#[test]
fn level_weights_are_exact_halvings() {
    assert_eq!([0, 1, 2, 3].map(level_weight), [1.0, 0.5, 0.25, 0.125]);
}

#[test]
fn combination_examples() {
    let l = 0.37;
    assert!((combine(&[l; 4]) - 1.875 * l).abs() < 1e-15);
    assert!((combine(&[0.0, 0.8, 0.4, 0.2]) - 0.525).abs() < 1e-15);
    let base = [0.3, 0.2, 0.1, 0.05];
    for i in 0..4 {
        let mut up = base;
        up[i] += 1e-3;
        assert!(combine(&up) > combine(&base));
    }
}

#[test]
fn deep_supervision_report_matches_per_level_recompute() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (n, k, e) = (2usize, 3usize, 8usize);
    let labels: Vec<u8> = (0..n * e * e * e).map(|_| r.random_range(0..k as u8)).collect();
    let levels: Vec<Var<f64>> = (0..4)
        .map(|l| {
            let s = e >> l;
            Var::constant(Tensor::randn(&[n, k, s, s, s], 1.0, &mut r))
        })
        .collect();
    let (total, report) = deep_supervision(&levels, &labels, LossOptions::default()).unwrap();
    assert_eq!(report.per_level.len(), 4);
    for (l, x) in levels.iter().enumerate() {
        // nearest-neighbour targets: every 2^l-th voxel along each axis
        let (f, s) = (1 << l, e >> l);
        let mut lab = Vec::new();
        for b in 0..n {
            for z in 0..s {
                for y in 0..s {
                    for xx in 0..s {
                        lab.push(labels[((b * e + z * f) * e + y * f) * e + xx * f]);
                    }
                }
            }
        }
        let (_, parts) = dice_ce(x, &lab, LossOptions::default()).unwrap();
        assert!((parts.total - report.per_level[l]).abs() < 1e-12);
    }
    assert!((combine(&report.per_level) - report.total).abs() < 1e-6);
    assert!((report.dice_term + report.ce_term - report.total).abs() < 1e-9);
    assert_eq!(total.value().data()[0], report.total);
}

#[test]
fn deep_supervision_rejects_mismatched_levels() {
    let labels = vec![0u8; 64];
    let levels = [
        Var::constant(Tensor::<f64>::zeros(&[1, 2, 4, 4, 4])),
        Var::constant(Tensor::zeros(&[1, 2, 4, 4, 4])),
    ];
    assert!(deep_supervision(&levels, &labels, LossOptions::default()).is_err());
    assert!(deep_supervision::<f64>(&[], &labels, LossOptions::default()).is_err());
}

// ---- metrics against brute force ----

#[test]
fn metrics_match_brute_force_on_random_masks() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for e in [8, 12, 16] {
        let dims = [e; 3];
        for _ in 0..50 {
            let a = random_mask(&mut r, dims);
            let b = random_mask(&mut r, dims);
            assert_eq!(dsc(&a, &b).unwrap(), oracle_dsc(&a, &b));
            assert_eq!(
                hd95(&a, &b, dims, [1.0; 3]).unwrap(),
                oracle_hd95(&a, &b, dims, [1.0; 3])
            );
        }
    }
}

#[test]
fn hd95_matches_brute_force_with_anisotropic_spacing() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let dims = [10, 8, 12];
    let spacing = [2.5, 0.7, 1.3];
    for _ in 0..30 {
        let a = random_mask(&mut r, dims);
        let b = random_mask(&mut r, dims);
        match (hd95(&a, &b, dims, spacing).unwrap(), oracle_hd95(&a, &b, dims, spacing)) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12 * (1.0 + y), "{x} vs {y}"),
            (x, y) => assert_eq!(x, y),
        }
    }
}

fn single(dims: [usize; 3], p: [usize; 3]) -> Vec<bool> {
    let mut m = vec![false; dims.iter().product()];
    m[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
    m
}

#[test]
fn metric_examples() {
    let dims = [6, 4, 4];
    let (a, b) = (single(dims, [0, 0, 0]), single(dims, [3, 0, 0]));
    assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), Some(3.0));
    assert_eq!(hd95(&a, &a, dims, [1.0; 3]).unwrap(), Some(0.0));
    assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    assert_eq!(dsc(&a, &b).unwrap(), 0.0);
    let half: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let shifted: Vec<bool> = (0..8).map(|i| (2..6).contains(&i)).collect();
    assert_eq!(dsc(&half, &shifted).unwrap(), 0.5);
    let empty = vec![false; a.len()];
    assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
    assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
    assert_eq!(hd95(&a, &empty, dims, [1.0; 3]).unwrap(), None);
    assert!(dsc(&a, &half).is_err());
}

#[test]
fn metrics_are_symmetric_and_translation_invariant() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let dims = [14; 3];
    for _ in 0..20 {
        let a = random_mask(&mut r, [8; 3]);
        let b = random_mask(&mut r, [8; 3]);
        let place = |m: &[bool], o: usize| {
            let mut out = vec![false; 14 * 14 * 14];
            for (i, &v) in m.iter().enumerate() {
                let (z, y, x) = (i / 64 + o, (i / 8) % 8 + o, i % 8 + o);
                out[(z * 14 + y) * 14 + x] = v;
            }
            out
        };
        let (a1, b1, a2, b2) = (place(&a, 1), place(&b, 1), place(&a, 5), place(&b, 5));
        assert_eq!(dsc(&a1, &b1).unwrap(), dsc(&b1, &a1).unwrap());
        let h = hd95(&a1, &b1, dims, [1.0; 3]).unwrap();
        assert_eq!(h, hd95(&b1, &a1, dims, [1.0; 3]).unwrap());
        assert_eq!(h, hd95(&a2, &b2, dims, [1.0; 3]).unwrap());
    }
}

#[test]
fn nearest_rank_is_the_maximum_for_small_sets_only() {
    for n in 1..=19 {
        assert_eq!(percentile95_rank(n), n - 1, "n = {n}");
    }
    for n in 20..200 {
        assert!(percentile95_rank(n) < n - 1, "n = {n}");
    }
}

#[test]
fn hd95_is_the_hausdorff_distance_for_small_boundaries() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let dims = [6; 3];
    let mut tested = 0;
    while tested < 40 {
        let a: Vec<bool> = (0..216).map(|_| r.random_bool(0.04)).collect();
        let b: Vec<bool> = (0..216).map(|_| r.random_bool(0.04)).collect();
        let (ba, bb) = (oracle_boundary(&a, dims), oracle_boundary(&b, dims));
        if ba.is_empty() || bb.is_empty() || ba.len() > 19 || bb.len() > 19 {
            continue;
        }
        let max_dir = |p: &[[usize; 3]], q: &[[usize; 3]]| {
            p.iter()
                .map(|x| {
                    q.iter()
                        .map(|y| (0..3).map(|i| (x[i] as f64 - y[i] as f64).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        let hausdorff = max_dir(&ba, &bb).max(max_dir(&bb, &ba));
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), Some(hausdorff));
        tested += 1;
    }
}

#[test]
fn report_marks_undefined_classes_and_serialises() {
    let dims = [4, 4, 4];
    let gt: Vec<u8> = (0..64).map(|i| if i < 16 { 1 } else { 0 }).collect();
    let pred = gt.clone();
    let report = MetricsReport::evaluate(&pred, &gt, dims, [1.0; 3], 3).unwrap();
    assert_eq!(report.classes.len(), 2);
    assert_eq!(report.classes[0].dsc_percent, 100.0);
    assert_eq!(report.classes[0].hd95, Some(0.0));
    // class 2 is absent from both: DSC 1 by convention, HD95 undefined
    assert_eq!(report.classes[1].dsc_percent, 100.0);
    assert!(!report.classes[1].defined);
    assert_eq!(report.mean_hd95, Some(0.0));
    assert!(report.to_text().contains("undefined"));
    let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);

    let avg = MetricsReport::average(&[
        report.clone(),
        MetricsReport::evaluate(&vec![0; 64], &gt, dims, [1.0; 3], 3).unwrap(),
    ]);
    assert_eq!(avg.classes[0].dsc_percent, 50.0);
    assert_eq!(avg.classes[0].hd95, Some(0.0));
}
