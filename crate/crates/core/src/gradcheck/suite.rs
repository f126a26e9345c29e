//! The registered gradient checks: every differentiable tensor op, every
//! network block, the loss and a tiny end-to-end model.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check, check_with_step, project, GradcheckReport};
use crate::blocks::{Csab, Dacb, Dmsf, Dmsu};
use crate::error::Result;
use crate::loss::{deep_supervision, dice_ce, LossOptions};
use crate::model::{GlimsModel, ModelConfig};
use crate::params::{Bound, Init, ParamStore};
use crate::swin::{PatchExpand, PatchMerge, StageSpec, SwinStage, WindowAttention, WindowGrid};
use crate::tensor::{Conv3dOptions, Tensor, Var};

/// Tolerance for single ops and blocks.
pub const TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const TOL_END_TO_END: f64 = 1e-3;
/// Relative step for the end-to-end model. Ops and blocks use
/// [`super::STEP`]; through the stacked LeakyReLU layers a 1e-3 nudge
/// to one weight moves enough pre-activations across zero to bias the
/// difference quotient, so the model uses a step near the f64 optimum
/// for central differences (cube root of machine epsilon).
pub const STEP_END_TO_END: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Op,
    Block,
    EndToEnd,
}

pub struct Case {
    pub name: &'static str,
    pub group: Group,
    pub run: fn() -> Result<GradcheckReport>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Checks `f` on `inputs` through a fixed random projection of its output.
fn op(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> Result<GradcheckReport> {
    let mut r = rng(99);
    let shape = {
        let vars: Vec<_> = inputs.iter().cloned().map(Var::constant).collect();
        f(&vars)?.shape().to_vec()
    };
    let weights = Tensor::randn(&shape, 1.0, &mut r);
    check(name, &inputs, None, TOL, &mut r, |v| project(&f(v)?, &weights))
}

/// Parameters redrawn from N(0, std^2) so every gradient is non-trivial.
fn randomized(store: &ParamStore<f32>, std: f64, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    store
        .iter()
        .map(|(_, _, t)| Tensor::randn(t.shape(), std, &mut r))
        .collect()
}

/// Checks a block over its data inputs and all of its parameters. `f`
/// returns one or more outputs, each projected with its own weights.
fn block(
    name: &str,
    data: Vec<Tensor<f64>>,
    params: Vec<Tensor<f64>>,
    samples: Option<usize>,
    tol: f64,
    f: impl Fn(&Bound<f64>, &[Var<f64>]) -> Result<Vec<Var<f64>>>,
) -> Result<GradcheckReport> {
    let k = data.len();
    let split = |v: &[Var<f64>]| (Bound::from_vars(v[k..].to_vec()), v[..k].to_vec());
    let mut r = rng(7);
    let inputs: Vec<Tensor<f64>> = data.into_iter().chain(params).collect();
    let weights: Vec<Tensor<f64>> = {
        let vars: Vec<_> = inputs.iter().cloned().map(Var::constant).collect();
        let (p, x) = split(&vars);
        f(&p, &x)?
            .iter()
            .map(|o| Tensor::randn(o.shape(), 1.0, &mut r))
            .collect()
    };
    check(name, &inputs, samples, tol, &mut r, |v| {
        let (p, x) = split(v);
        let outs = f(&p, &x)?;
        let mut total = project(&outs[0], &weights[0])?;
        for (o, w) in outs.iter().zip(&weights).skip(1) {
            total = total.add(&project(o, w)?)?;
        }
        Ok(total)
    })
}

fn build<B>(seed: u64, make: impl FnOnce(&mut Init<'_, ChaCha8Rng>) -> B) -> (B, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let b = make(&mut Init::new(&mut store, &mut r));
    (b, store)
}

fn x4() -> Tensor<f64> {
    randn(&[4], 1)
}

fn labels(n: usize, classes: u8, seed: u64) -> Vec<u8> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

macro_rules! case {
    ($group:ident, $name:literal, $body:expr) => {
        Case {
            name: $name,
            group: Group::$group,
            run: || $body,
        }
    };
}

pub fn cases() -> Vec<Case> {
    vec![
        case!(Op, "neg", op("neg", vec![x4()], |v| Ok(v[0].neg()))),
        case!(Op, "scale", op("scale", vec![x4()], |v| Ok(v[0].scale(-2.5)))),
        case!(
            Op,
            "add_scalar",
            op("add_scalar", vec![x4()], |v| Ok(v[0].add_scalar(0.3)))
        ),
        case!(Op, "exp", op("exp", vec![x4()], |v| Ok(v[0].exp()))),
        case!(Op, "ln", op("ln", vec![x4().map(|v| v.abs() + 0.5)], |v| Ok(v[0].ln()))),
        case!(Op, "square", op("square", vec![x4()], |v| Ok(v[0].square()))),
        case!(Op, "sigmoid", op("sigmoid", vec![x4()], |v| Ok(v[0].sigmoid()))),
        case!(Op, "gelu", op("gelu", vec![x4()], |v| Ok(v[0].gelu()))),
        case!(Op, "leaky_relu", {
            let x = Tensor::new(&[4], vec![-1.3, -0.2, 0.4, 2.0])?;
            op("leaky_relu", vec![x], |v| Ok(v[0].leaky_relu(0.01)))
        }),
        case!(
            Op,
            "add",
            op("add", vec![randn(&[2, 3], 2), randn(&[1, 3], 3)], |v| v[0].add(&v[1]))
        ),
        case!(
            Op,
            "sub",
            op("sub", vec![randn(&[2, 3], 2), randn(&[1, 3], 3)], |v| v[0].sub(&v[1]))
        ),
        case!(
            Op,
            "mul",
            op("mul", vec![randn(&[2, 3], 2), randn(&[1, 3], 3)], |v| v[0].mul(&v[1]))
        ),
        case!(Op, "div", {
            let d = randn(&[1, 3], 3).map(|v| v.abs() + 0.7);
            op("div", vec![randn(&[2, 3], 2), d], |v| v[0].div(&v[1]))
        }),
        case!(
            Op,
            "sum_all",
            op("sum_all", vec![randn(&[2, 3, 2], 4)], |v| Ok(v[0].sum_all()))
        ),
        case!(
            Op,
            "mean_all",
            op("mean_all", vec![randn(&[2, 3, 2], 4)], |v| Ok(v[0].mean_all()))
        ),
        case!(
            Op,
            "sum_axes",
            op("sum_axes", vec![randn(&[2, 3, 2], 4)], |v| v[0].sum_axes(&[0, 2]))
        ),
        case!(
            Op,
            "mean_axes",
            op("mean_axes", vec![randn(&[2, 3, 2], 4)], |v| v[0].mean_axes(&[1]))
        ),
        case!(
            Op,
            "max_axes",
            op("max_axes", vec![randn(&[2, 3, 2], 4)], |v| v[0].max_axes(&[1, 2]))
        ),
        case!(
            Op,
            "softmax",
            op("softmax", vec![randn(&[2, 3, 2], 4)], |v| v[0].softmax(1))
        ),
        case!(
            Op,
            "reshape",
            op("reshape", vec![randn(&[2, 3, 2], 6)], |v| v[0].reshape(&[3, 4]))
        ),
        case!(
            Op,
            "permute",
            op("permute", vec![randn(&[2, 3, 2], 6)], |v| v[0].permute(&[2, 0, 1]))
        ),
        case!(
            Op,
            "narrow",
            op("narrow", vec![randn(&[2, 3, 2], 6)], |v| v[0].narrow(1, 1, 2))
        ),
        case!(
            Op,
            "split",
            op("split", vec![randn(&[2, 3, 2], 6)], |v| {
                let parts = v[0].split(1, &[1, 2])?;
                parts[0].sum_all().add(&parts[1].square().sum_all())
            })
        ),
        case!(
            Op,
            "concat",
            op("concat", vec![randn(&[2, 3, 2], 6), randn(&[2, 1, 2], 7)], |v| {
                Var::concat(&[v[0].clone(), v[1].clone()], 1)
            })
        ),
        case!(Op, "gather", {
            let index = Rc::new(vec![3u32, 0, u32::MAX, 3, 11]);
            op("gather", vec![randn(&[2, 3, 2], 6)], move |v| {
                v[0].gather(&[5], Rc::clone(&index))
            })
        }),
        case!(
            Op,
            "matmul",
            op("matmul", vec![randn(&[2, 2, 3], 8), randn(&[2, 3, 2], 9)], |v| v[0]
                .matmul(&v[1]))
        ),
        case!(
            Op,
            "linear",
            op(
                "linear",
                vec![randn(&[2, 2, 3], 10), randn(&[4, 3], 11), randn(&[4], 12)],
                |v| v[0].linear(&v[1], Some(&v[2]))
            )
        ),
        case!(
            Op,
            "instance_norm",
            op("instance_norm", vec![randn(&[1, 2, 2, 1, 2], 15)], |v| {
                v[0].instance_norm(1e-5)
            })
        ),
        case!(
            Op,
            "layer_norm",
            op(
                "layer_norm",
                vec![randn(&[3, 4], 16), randn(&[4], 17), randn(&[4], 18)],
                |v| v[0].layer_norm(&v[1], &v[2], 1e-5)
            )
        ),
        case!(
            Op,
            "pad3d",
            op("pad3d", vec![randn(&[1, 2, 2, 2, 3], 19)], |v| {
                v[0].pad3d([(1, 0), (0, 1), (1, 1)])
            })
        ),
        case!(
            Op,
            "crop3d",
            op("crop3d", vec![randn(&[1, 2, 2, 2, 3], 19)], |v| {
                v[0].crop3d([0, 1, 1], [2, 1, 2])
            })
        ),
        case!(
            Op,
            "upsample_nearest2",
            op("upsample_nearest2", vec![randn(&[1, 2, 2, 2, 3], 19)], |v| {
                v[0].upsample_nearest2()
            })
        ),
        case!(
            Op,
            "conv3d",
            op(
                "conv3d",
                vec![
                    randn(&[1, 2, 4, 3, 4], 20),
                    randn(&[3, 2, 3, 3, 3], 21),
                    randn(&[3], 22)
                ],
                |v| {
                    let opts = Conv3dOptions {
                        stride: 2,
                        dilation: 1,
                        padding: 1,
                        groups: 1,
                    };
                    v[0].conv3d(&v[1], Some(&v[2]), opts)
                }
            )
        ),
        case!(
            Op,
            "conv3d_depthwise_dilated",
            op(
                "conv3d_depthwise_dilated",
                vec![randn(&[1, 2, 4, 4, 4], 23), randn(&[2, 1, 3, 3, 3], 24)],
                |v| v[0].conv3d(&v[1], None, Conv3dOptions::depthwise(2, 2))
            )
        ),
        case!(
            Op,
            "conv3d_transpose",
            op(
                "conv3d_transpose",
                vec![
                    randn(&[1, 3, 2, 1, 2], 30),
                    randn(&[3, 2, 2, 2, 2], 31),
                    randn(&[2], 32)
                ],
                |v| v[0].conv3d_transpose(&v[1], Some(&v[2]))
            )
        ),
        case!(Block, "dacb", {
            let (b, store) = build(1, |i| Dacb::new(&mut i.scope("dacb"), 2, &[1, 2, 3]));
            block(
                "dacb",
                vec![randn(&[1, 2, 4, 4, 4], 40)],
                randomized(&store, 0.5, 41),
                None,
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0])?]),
            )
        }),
        case!(Block, "dmsf", {
            let (b, store) = build(2, |i| Dmsf::new(&mut i.scope("dmsf"), 2, &[1, 2]));
            block(
                "dmsf",
                vec![randn(&[1, 2, 4, 4, 4], 42)],
                randomized(&store, 0.5, 3),
                None,
                TOL,
                |p, x| {
                    let out = b.forward(p, &x[0])?;
                    Ok(vec![out.skip, out.down])
                },
            )
        }),
        case!(Block, "dmsu", {
            let (b, store) = build(3, |i| Dmsu::new(&mut i.scope("dmsu"), 2, &[1, 2]));
            let data = vec![randn(&[1, 4, 2, 2, 2], 44), randn(&[1, 2, 4, 4, 4], 45)];
            block("dmsu", data, randomized(&store, 0.5, 46), None, TOL, |p, x| {
                Ok(vec![b.forward(p, &x[0], &x[1])?])
            })
        }),
        case!(Block, "csab", {
            let (b, store) = build(4, |i| Csab::new(&mut i.scope("csab"), 8, 4));
            block(
                "csab",
                vec![randn(&[2, 8, 3, 3, 3], 47)],
                randomized(&store, 0.5, 48),
                None,
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0])?.refined]),
            )
        }),
        case!(Block, "w_msa", {
            let (b, store) = build(5, |i| WindowAttention::new(&mut i.scope("attn"), 8, 2));
            block(
                "w_msa",
                vec![randn(&[2, 8, 8], 49)],
                randomized(&store, 0.3, 50),
                None,
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0], None)?]),
            )
        }),
        case!(Block, "sw_msa", {
            let grid = WindowGrid::new([4, 4, 4], 2, true)?;
            let mask = grid.mask::<f64>();
            let (b, store) = build(6, |i| WindowAttention::new(&mut i.scope("attn"), 8, 2));
            let tokens = [grid.num_windows(), grid.tokens_per_window(), 8];
            block(
                "sw_msa",
                vec![randn(&tokens, 51)],
                randomized(&store, 0.3, 52),
                None,
                TOL,
                move |p, x| Ok(vec![b.forward(p, &x[0], mask.as_ref())?]),
            )
        }),
        case!(Block, "swin_pair", {
            let spec = StageSpec {
                dim: 8,
                heads: 2,
                depth: 2,
                window: 2,
                mlp_ratio: 2,
                pos_extent: Some([4, 4, 4]),
            };
            let (b, store) = build(7, |i| SwinStage::new(&mut i.scope("stage"), &spec));
            block(
                "swin_pair",
                vec![randn(&[1, 8, 4, 4, 4], 53)],
                randomized(&store, 0.3, 54),
                Some(400),
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0])?]),
            )
        }),
        case!(Block, "patch_merge", {
            let (b, store) = build(8, |i| PatchMerge::new(&mut i.scope("merge"), 4));
            block(
                "patch_merge",
                vec![randn(&[1, 4, 2, 4, 2], 55)],
                randomized(&store, 0.5, 56),
                None,
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0])?]),
            )
        }),
        case!(Block, "patch_expand", {
            let (b, store) = build(9, |i| PatchExpand::new(&mut i.scope("expand"), 4));
            block(
                "patch_expand",
                vec![randn(&[1, 4, 2, 1, 2], 57)],
                randomized(&store, 0.5, 58),
                None,
                TOL,
                |p, x| Ok(vec![b.forward(p, &x[0])?]),
            )
        }),
        case!(Block, "dice_ce", {
            let lab = labels(2 * 8, 3, 59);
            let mut r = rng(60);
            check("dice_ce", &[randn(&[2, 3, 2, 2, 2], 61)], None, TOL, &mut r, |v| {
                Ok(dice_ce(&v[0], &lab, LossOptions::default())?.0)
            })
        }),
        case!(Block, "deep_supervision", {
            let lab = labels(2 * 64, 3, 62);
            let mut r = rng(63);
            let inputs = [randn(&[2, 3, 4, 4, 4], 64), randn(&[2, 3, 2, 2, 2], 65)];
            check("deep_supervision", &inputs, None, TOL, &mut r, |v| {
                Ok(deep_supervision(v, &lab, LossOptions::default())?.0)
            })
        }),
        case!(EndToEnd, "end_to_end", end_to_end()),
    ]
}

/// Tiny hybrid model: two convolutional levels, one transformer level and a
/// transformer bottleneck on 16^3 patches.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        num_levels: 3,
        depths: vec![2, 2],
        patch_size: 16,
        deep_supervision_levels: 3,
        ..ModelConfig::full()
    }
}

fn end_to_end() -> Result<GradcheckReport> {
    end_to_end_draw(0, STEP_END_TO_END)
}

/// End-to-end check of the tiny model on draw `draw` (weights, input,
/// labels and sampled coordinates all derive from it).
pub fn end_to_end_draw(draw: u64, step: f64) -> Result<GradcheckReport> {
    let config = tiny_config();
    let model = GlimsModel::build(&config, 3 + 100 * draw)?;
    let params: Vec<Tensor<f64>> = model.params.iter().map(|(_, _, t)| t.cast()).collect();
    let s = config.patch_size;
    let x = randn(&[1, config.in_channels, s, s, s], 66 + 100 * draw);
    let lab = labels(s * s * s, config.num_classes as u8, 67 + 100 * draw);
    let inputs: Vec<Tensor<f64>> = std::iter::once(x).chain(params).collect();
    let mut r = rng(68);
    check_with_step("end_to_end", &inputs, Some(64), TOL_END_TO_END, step, &mut r, |v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let out = model.forward(&p, &v[0])?;
        Ok(deep_supervision(&out.levels(), &lab, LossOptions::default())?.0)
    })
}

/// Runs every case whose name contains `filter` (all when empty).
pub fn run(filter: &str, mut on_report: impl FnMut(&GradcheckReport)) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for case in cases().into_iter().filter(|c| c.name.contains(filter)) {
        let report = (case.run)()?;
        on_report(&report);
        out.push(report);
    }
    Ok(out)
}
