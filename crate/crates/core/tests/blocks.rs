use glims::blocks::{Csab, Dacb, Dmsf, Dmsu, Pointwise};
use glims::params::{Init, ParamId, ParamStore};
use glims::{Error, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build<B>(make: impl FnOnce(&mut Init<'_, ChaCha8Rng>) -> B) -> (B, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = make(&mut Init::new(&mut store, &mut rng));
    (block, store)
}

fn zero_all(store: &mut ParamStore<f32>, ids: &[ParamId]) {
    for &id in ids {
        let z = Tensor::zeros(store.get(id).shape());
        store.set(id, z).unwrap();
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn at5(t: &Tensor<f32>, n: usize, c: usize, z: usize, y: usize, x: usize) -> f32 {
    t.at(&[n, c, z, y, x])
}

#[test]
fn aggregator_with_zero_weights_is_instance_norm() {
    let (b, mut store) = build(|i| Dacb::new(i, 3, &[1, 2, 3]));
    zero_all(&mut store, &b.param_ids());
    let x = Var::constant(randn(&[2, 3, 5, 4, 6], 1));
    let got = b.forward(&store.constants(), &x).unwrap();
    let want = x.instance_norm(1e-5).unwrap();
    assert_eq!(got.value(), want.value());
}

#[test]
fn aggregator_on_constant_channels_with_zero_weights_is_zero() {
    let (b, mut store) = build(|i| Dacb::new(i, 2, &[1, 2, 3]));
    zero_all(&mut store, &b.param_ids());
    let data = (0..2 * 64).map(|i| if i < 64 { 3.5 } else { -1.25 }).collect();
    let x = Var::constant(Tensor::new(&[1, 2, 4, 4, 4], data).unwrap());
    let y = b.forward(&store.constants(), &x).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn aggregator_preserves_shape_and_checks_channels() {
    let (b, store) = build(|i| Dacb::new(i, 4, &[1, 2, 3]));
    let p = store.constants();
    let y = b.forward(&p, &Var::constant(randn(&[1, 4, 6, 5, 7], 2))).unwrap();
    assert_eq!(y.shape(), &[1, 4, 6, 5, 7]);
    let err = b.forward(&p, &Var::constant(randn(&[1, 3, 6, 5, 7], 2))).err().unwrap();
    assert!(matches!(
        err,
        Error::AxisMismatch {
            axis: 1,
            expected: 4,
            actual: 3,
            ..
        }
    ));
}

#[test]
fn aggregator_parameter_count_matches_hand_count() {
    let (_, store) = build(|i| Dacb::new(i, 24, &[1, 2, 3]));
    // three depth-wise 3^3 kernels, 72 -> 48 and 48 -> 24 point-wise with bias
    let hand = 3 * 24 * 27 + (72 * 48 + 48) + (48 * 24 + 24);
    assert_eq!(store.numel(), hand);
}

#[test]
fn aggregator_pre_norm_is_translation_equivariant_in_the_interior() {
    let (b, store) = build(|i| Dacb::new(i, 2, &[1, 2, 3]));
    let p = store.constants();
    let e = 12;
    let x = randn(&[1, 2, e, e, e], 3);
    // shift by one voxel along each axis
    let shifted = Tensor::from_fn(&[1, 2, e, e, e], |i| {
        let (c, r) = (i / (e * e * e), i % (e * e * e));
        let (z, y, xx) = (r / (e * e), (r / e) % e, r % e);
        if z == 0 || y == 0 || xx == 0 {
            0.0
        } else {
            at5(&x, 0, c, z - 1, y - 1, xx - 1)
        }
    });
    let a = b.forward_pre_norm(&p, &Var::constant(x)).unwrap();
    let s = b.forward_pre_norm(&p, &Var::constant(shifted)).unwrap();
    // receptive radius is the largest dilation (3); stay clear of both borders
    let (lo, hi) = (4, e - 5);
    for c in 0..2 {
        for z in lo..hi {
            for y in lo..hi {
                for xx in lo..hi {
                    let u = at5(a.value(), 0, c, z, y, xx);
                    let v = at5(s.value(), 0, c, z + 1, y + 1, xx + 1);
                    assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{u} vs {v}");
                }
            }
        }
    }
}

#[test]
fn downsampling_stage_shapes() {
    let (b, store) = build(|i| Dmsf::new(i, 4, &[1, 2, 3]));
    let out = b
        .forward(&store.constants(), &Var::constant(randn(&[1, 4, 8, 8, 8], 4)))
        .unwrap();
    assert_eq!(out.skip.shape(), &[1, 4, 8, 8, 8]);
    assert_eq!(out.down.shape(), &[1, 8, 4, 4, 4]);
}

#[test]
fn downsampling_stage_with_zero_kernel_outputs_its_bias() {
    let (b, mut store) = build(|i| Dmsf::new(i, 2, &[1, 2]));
    zero_all(&mut store, &[b.down_weight]);
    let bias = Tensor::new(&[4], vec![0.0, 0.5, 1.25, 3.0]).unwrap();
    store.set(b.down_bias, bias.clone()).unwrap();
    let out = b
        .forward(&store.constants(), &Var::constant(randn(&[2, 2, 4, 6, 4], 5)))
        .unwrap();
    let d = out.down.value();
    assert_eq!(d.shape(), &[2, 4, 2, 3, 2]);
    for (i, &v) in d.data().iter().enumerate() {
        assert_eq!(v, bias.data()[(i / 12) % 4]);
    }
}

#[test]
fn downsampling_stage_rejects_odd_extents() {
    let (b, store) = build(|i| Dmsf::new(i, 2, &[1]));
    let err = b
        .forward(&store.constants(), &Var::constant(randn(&[1, 2, 4, 5, 4], 6)))
        .err()
        .unwrap();
    assert!(err.to_string().contains("odd extent 5"), "{err}");
}

#[test]
fn upsampling_stage_shape_contract() {
    let (b, store) = build(|i| Dmsu::new(i, 48, &[1, 2, 3]));
    let p = store.constants();
    let x = Var::constant(randn(&[1, 96, 6, 6, 6], 7));
    let skip = Var::constant(randn(&[1, 48, 12, 12, 12], 8));
    assert_eq!(b.forward(&p, &x, &skip).unwrap().shape(), &[1, 48, 12, 12, 12]);
}

#[test]
fn upsampling_fuse_can_select_the_skip() {
    let (b, mut store) = build(|i| Dmsu::new(i, 3, &[1]));
    let c = 3;
    let mut w = vec![0.0; c * 2 * c];
    for o in 0..c {
        w[o * 2 * c + c + o] = 1.0;
    }
    store
        .set(b.fuse.weight, Tensor::new(&[c, 2 * c, 1, 1, 1], w).unwrap())
        .unwrap();
    let p = store.constants();
    let up = b.upsample(&p, &Var::constant(randn(&[1, 6, 2, 2, 2], 9))).unwrap();
    let skip = Var::constant(randn(&[1, 3, 4, 4, 4], 10));
    assert_eq!(b.fuse(&p, &up, &skip).unwrap().value(), skip.value());
}

#[test]
fn upsampling_stage_rejects_mismatched_skip() {
    let (b, store) = build(|i| Dmsu::new(i, 2, &[1]));
    let p = store.constants();
    let err = b
        .forward(
            &p,
            &Var::constant(randn(&[1, 4, 3, 3, 3], 11)),
            &Var::constant(randn(&[1, 2, 8, 8, 8], 12)),
        )
        .err()
        .unwrap();
    assert!(err.to_string().contains("differ from skip extents"), "{err}");
}

#[test]
fn gate_with_zero_weights_scales_by_a_quarter() {
    let (b, mut store) = build(|i| Csab::new(i, 16, 8));
    zero_all(&mut store, &b.param_ids());
    let y = Var::constant(randn(&[2, 16, 3, 4, 5], 13));
    let g = b.forward(&store.constants(), &y).unwrap();
    let want = y.value().map(|v| 0.25 * v);
    assert_eq!(g.refined.value(), &want);
}

#[test]
fn gate_of_zero_feature_is_zero() {
    let (b, store) = build(|i| Csab::new(i, 8, 8));
    let g = b
        .forward(&store.constants(), &Var::constant(Tensor::zeros(&[1, 8, 3, 3, 3])))
        .unwrap();
    assert!(g.refined.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_factors_are_bounded_and_shrink_the_feature() {
    let (b, store) = build(|i| Csab::new(i, 8, 8));
    let y = Var::constant(randn(&[2, 8, 4, 4, 4], 14).map(|v| 3.0 * v));
    let g = b.forward(&store.constants(), &y).unwrap();
    assert_eq!(g.channel.shape(), &[2, 8, 1, 1, 1]);
    assert_eq!(g.spatial.shape(), &[2, 1, 4, 4, 4]);
    for &a in g.channel.value().data().iter().chain(g.spatial.value().data()) {
        assert!(a > 0.0 && a < 1.0);
    }
    for (r, v) in g.refined.value().data().iter().zip(y.value().data()) {
        assert!(r.abs() <= v.abs());
    }
}

#[test]
fn gate_with_saturated_channel_branch_is_spatial_only() {
    let (b, mut store) = build(|i| Csab::new(i, 8, 8));
    zero_all(&mut store, &[b.mlp_out_weight]);
    store.set(b.mlp_out_bias, Tensor::full(&[8], 20.0)).unwrap();
    let y = Var::constant(randn(&[1, 8, 3, 3, 3], 15));
    let g = b.forward(&store.constants(), &y).unwrap();
    let want = y.mul(&g.spatial).unwrap();
    assert!(g.refined.value().max_abs_diff(want.value()) < 1e-6);
}

#[test]
fn gate_hidden_width_floors_at_one() {
    assert_eq!(Csab::hidden_width(4, 8), 1);
    assert_eq!(Csab::hidden_width(12, 8), 1);
    assert_eq!(Csab::hidden_width(24, 8), 3);
}

#[test]
fn pointwise_stem_count() {
    let (_, store) = build(|i| Pointwise::new(i, 4, 24));
    assert_eq!(store.numel(), 4 * 24 + 24);
}
