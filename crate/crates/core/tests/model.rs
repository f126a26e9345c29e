use std::time::Instant;

use glims::gradcheck::suite::tiny_config;
use glims::model::{GlimsModel, ModelConfig, PUBLISHED_PARAMS};
use glims::{Error, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{cnn_only, cnn_only_hand_count};

fn input(config: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
    let s = config.patch_size;
    Tensor::randn(
        &[n, config.in_channels, s, s, s],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[test]
fn same_seed_gives_identical_weights_and_outputs() {
    let c = tiny_config();
    let a = GlimsModel::build(&c, 9).unwrap();
    let b = GlimsModel::build(&c, 9).unwrap();
    let x = input(&c, 1, 1);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    let other = GlimsModel::build(&c, 10).unwrap();
    assert_ne!(a.predict(&x).unwrap(), other.predict(&x).unwrap());
}

#[test]
fn wrong_patch_size_is_rejected() {
    let c = tiny_config();
    let m = GlimsModel::build(&c, 1).unwrap();
    let x = Tensor::zeros(&[1, c.in_channels, 16, 16, 8]);
    let err = m.predict(&x).err().unwrap();
    assert!(
        matches!(
            err,
            Error::AxisMismatch {
                axis: 4,
                expected: 16,
                actual: 8,
                ..
            }
        ),
        "{err}"
    );
    let x = Tensor::zeros(&[1, 3, 16, 16, 16]);
    assert!(m.predict(&x).is_err());
}

#[test]
fn invalid_configs_are_rejected_with_every_reason() {
    let c = ModelConfig {
        patch_size: 40,
        depths: vec![2, 3],
        ..ModelConfig::full()
    };
    let Err(Error::InvalidConfig(errs)) = GlimsModel::build(&c, 0) else {
        panic!("expected a config error");
    };
    assert_eq!(errs.len(), 2, "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("patch size not divisible")));
    assert!(errs.iter().any(|e| e.contains("odd")));
}

#[test]
fn tiny_forward_shapes_and_speed() {
    let c = tiny_config();
    let m = GlimsModel::build(&c, 2).unwrap();
    let x = Var::constant(input(&c, 2, 3));
    let start = Instant::now();
    let out = m.forward(&m.params.constants(), &x).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(out.logits.shape(), &[2, 4, 16, 16, 16]);
    let aux: Vec<_> = out.aux.iter().map(|a| a.shape().to_vec()).collect();
    assert_eq!(aux, [vec![2, 4, 8, 8, 8], vec![2, 4, 4, 4, 4]]);
    assert_eq!(out.attention.len(), 3);
    for (l, a) in out.attention.iter().enumerate() {
        let e = 16 >> l;
        assert_eq!(a.level, l);
        assert_eq!(a.channel.shape(), &[2, 4 << l, 1, 1, 1]);
        assert_eq!(a.spatial.shape(), &[2, 1, e, e, e]);
    }
    assert!(out.logits.value().is_finite());
}

#[test]
fn zero_input_gives_finite_logits() {
    let c = tiny_config();
    let m = GlimsModel::build(&c, 4).unwrap();
    let y = m.predict(&Tensor::zeros(&[1, 4, 16, 16, 16])).unwrap();
    assert!(y.is_finite());
}

#[test]
fn every_parameter_is_used_exactly_once() {
    for c in [tiny_config(), cnn_only(), ModelConfig::reduced()] {
        let m = GlimsModel::build(&c, 0).unwrap();
        m.check_unique_params().unwrap();
        assert_eq!(m.net.param_ids().len(), m.params.len());
    }
}

#[test]
fn convolutional_model_matches_hand_count() {
    let m = GlimsModel::build(&cnn_only(), 0).unwrap();
    assert_eq!(m.count_parameters(), cnn_only_hand_count());
}

#[test]
fn reference_model_is_close_to_the_published_size() {
    let m = GlimsModel::build(&ModelConfig::full(), 0).unwrap();
    let report = m.param_report();
    assert_eq!(report.total, m.count_parameters());
    assert_eq!(report.groups.iter().map(|g| g.count).sum::<usize>(), report.total);
    assert!(
        report.relative_delta().abs() <= 0.15,
        "{} vs {PUBLISHED_PARAMS}",
        report.total
    );
}

#[test]
fn doubling_width_roughly_quadruples_the_count() {
    let base = GlimsModel::build(&cnn_only(), 0).unwrap().count_parameters() as f64;
    let wide = ModelConfig {
        base_channels: 8,
        ..cnn_only()
    };
    let ratio = GlimsModel::build(&wide, 0).unwrap().count_parameters() as f64 / base;
    assert!(ratio > 3.0 && ratio <= 4.0, "{ratio}");
}

#[test]
fn fingerprint_tracks_the_config() {
    let a = tiny_config();
    assert_eq!(a.fingerprint(), tiny_config().fingerprint());
    assert_eq!(a.fingerprint().len(), 64);
    let b = ModelConfig {
        window: 3,
        ..tiny_config()
    };
    assert_ne!(a.fingerprint(), b.fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn decoder_mirrors_the_encoder(levels in 1usize..=3, transformer in 0usize..=1, base in 1usize..=3, ds in 1usize..=3) {
        let transformer = transformer.min(levels - 1);
        let mut depths = vec![2; transformer];
        depths.push(2 * (levels % 2));
        let c = ModelConfig {
            base_channels: 2 * base,
            num_levels: levels,
            depths,
            window: 2,
            patch_size: 4 << levels,
            deep_supervision_levels: ds.min(levels),
            head_dim: 4,
            ..ModelConfig::full()
        };
        let m = GlimsModel::build(&c, 5).unwrap();
        let out = m.forward(&m.params.constants(), &Var::constant(input(&c, 1, 6))).unwrap();
        let levels_out = out.levels();
        prop_assert_eq!(levels_out.len(), c.deep_supervision_levels);
        for (l, y) in levels_out.iter().enumerate() {
            let e = c.patch_size >> l;
            prop_assert_eq!(y.shape(), &[1, c.num_classes, e, e, e][..]);
        }
        for a in &out.attention {
            prop_assert_eq!(a.channel.shape()[1], c.channels(a.level));
        }
    }
}
