//! Soft Dice + cross-entropy objective and its deep-supervision combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor, Var};

pub const LOSS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Divide the cross-entropy sum by the voxel count.
    pub normalize_ce: bool,
    /// Drop the cross-entropy term entirely.
    pub dice_only: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            normalize_ce: true,
            dice_only: false,
        }
    }
}

/// Values of one supervised level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelLoss {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_level: Vec<f64>,
    /// Weighted sum of the Dice terms over levels.
    pub dice_term: f64,
    /// Weighted sum of the cross-entropy terms over levels.
    pub ce_term: f64,
}

/// Weight of supervised level `i` (0 = full resolution).
pub fn level_weight(i: usize) -> f64 {
    0.5f64.powi(i as i32)
}

/// Weighted sum of per-level losses.
pub fn combine(per_level: &[f64]) -> f64 {
    per_level.iter().enumerate().map(|(i, l)| level_weight(i) * l).sum()
}

/// One-hot encoding `[N, K, D, H, W]` of labels laid out `[N, D, H, W]`.
pub fn one_hot<T: Element>(labels: &[u8], shape: [usize; 4], classes: usize) -> Result<Tensor<T>> {
    let [n, d, h, w] = shape;
    let vox = d * h * w;
    if labels.len() != n * vox {
        return Err(Error::shape(
            "one_hot",
            format!("{} labels for shape {shape:?}", labels.len()),
        ));
    }
    let mut data = vec![T::zero(); n * classes * vox];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        let (b, v) = (i / vox, i % vox);
        data[(b * classes + l as usize) * vox + v] = T::one();
    }
    Tensor::new(&[n, classes, d, h, w], data)
}

/// Soft Dice + cross-entropy between softmax(logits) and integer labels.
///
/// `dice = 1 - (2/K) sum_k sum(y p) / (sum(y^2) + sum(p^2) + eps)` with sums
/// over the whole batch, `ce = -(1/V) sum y log(p + eps)` with `V` the voxel
/// count (or no division when `normalize_ce` is off).
pub fn dice_ce<T: Element>(logits: &Var<T>, labels: &[u8], opts: LossOptions) -> Result<(Var<T>, LevelLoss)> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(Error::shape(
            "dice_ce",
            format!("logits must be [N, K, D, H, W], got {s:?}"),
        ));
    }
    let k = s[1];
    let y = one_hot::<T>(labels, [s[0], s[2], s[3], s[4]], k)?;
    let voxels = labels.len();
    let p = logits.softmax(1)?;
    let yv = Var::constant(y.clone());

    let axes = [0, 2, 3, 4];
    let overlap = p.mul(&yv)?.sum_axes(&axes)?;
    let y_sq = Var::constant(crate::tensor::kernels::sum_to_shape(&y, &[1, k, 1, 1, 1]));
    let denom = p.square().sum_axes(&axes)?.add(&y_sq)?.add_scalar(cst(LOSS_EPS));
    let ratio = overlap.div(&denom)?.sum_all();
    let dice = ratio.scale(cst(-2.0 / k as f64)).add_scalar(T::one());

    let (total, ce_value) = if opts.dice_only {
        (dice.clone(), 0.0)
    } else {
        let log_p = p.add_scalar(cst(LOSS_EPS)).ln();
        let norm = if opts.normalize_ce { voxels as f64 } else { 1.0 };
        let ce = log_p.mul(&yv)?.sum_all().scale(cst(-1.0 / norm));
        let v = ce.value().data()[0].to_f64().unwrap_or(f64::NAN);
        (dice.add(&ce)?, v)
    };
    let level = LevelLoss {
        total: total.value().data()[0].to_f64().unwrap_or(f64::NAN),
        dice: dice.value().data()[0].to_f64().unwrap_or(f64::NAN),
        ce: ce_value,
    };
    Ok((total, level))
}

/// Nearest-neighbour downsampling of `[N, D, H, W]` labels by `2^level`,
/// taking the voxel at index `2^level * i` along each axis.
pub fn downsample_labels(labels: &[u8], shape: [usize; 4], level: usize) -> Result<(Vec<u8>, [usize; 4])> {
    let f = 1usize << level;
    let [n, d, h, w] = shape;
    if d % f != 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(
            "downsample_labels",
            format!("extents {:?} not divisible by {f}", &shape[1..]),
        ));
    }
    let (d2, h2, w2) = (d / f, h / f, w / f);
    let mut out = Vec::with_capacity(n * d2 * h2 * w2);
    for b in 0..n {
        for z in 0..d2 {
            for y in 0..h2 {
                for x in 0..w2 {
                    out.push(labels[((b * d + z * f) * h + y * f) * w + x * f]);
                }
            }
        }
    }
    Ok((out, [n, d2, h2, w2]))
}

/// Deep-supervision objective over `levels` (full resolution first), each
/// at half the extent of the previous one.
pub fn deep_supervision<T: Element>(
    levels: &[Var<T>],
    labels: &[u8],
    opts: LossOptions,
) -> Result<(Var<T>, LossReport)> {
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("deep_supervision: no outputs".into()))?;
    let s = first.shape();
    if s.len() != 5 {
        return Err(Error::shape(
            "deep_supervision",
            format!("logits must be 5-D, got {s:?}"),
        ));
    }
    let shape = [s[0], s[2], s[3], s[4]];
    let mut report = LossReport::default();
    let mut total: Option<Var<T>> = None;
    for (i, logits) in levels.iter().enumerate() {
        let (lab, lshape) = downsample_labels(labels, shape, i)?;
        let ls = logits.shape();
        if ls.len() != 5 || ls[0] != lshape[0] || ls[2..] != lshape[1..] {
            return Err(Error::shape(
                "deep_supervision",
                format!("level {i}: logits {ls:?} do not match label extents {:?}", &lshape[1..]),
            ));
        }
        let (loss, parts) = dice_ce(logits, &lab, opts)?;
        let w = level_weight(i);
        let weighted = loss.scale(cst(w));
        total = Some(match total {
            Some(t) => t.add(&weighted)?,
            None => weighted,
        });
        report.per_level.push(parts.total);
        report.dice_term += w * parts.dice;
        report.ce_term += w * parts.ce;
    }
    let total = total.expect("at least one level");
    report.total = total.value().data()[0].to_f64().unwrap_or(f64::NAN);
    Ok((total, report))
}
