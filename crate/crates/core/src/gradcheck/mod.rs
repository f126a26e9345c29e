//! Central finite-difference gradient checks in `f64`.
//!
//! The numeric side only ever evaluates forward passes on constant inputs,
//! so it is independent of every backward rule it validates.

pub mod suite;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Relative step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-3;

/// Error metric denominator floor: `|a - n| / max(|a|, |n|, 1)`.
pub const FLOOR: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.max_rel_err.is_finite()
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<6} {:<28} coords={:<5} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences. With `samples = Some(k)` only `k` coordinates drawn uniformly
/// over all inputs are perturbed.
pub fn check<R, F>(
    name: &str,
    inputs: &[Tensor<f64>],
    samples: Option<usize>,
    tolerance: f64,
    rng: &mut R,
    f: F,
) -> Result<GradcheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    check_with_step(name, inputs, samples, tolerance, STEP, rng, f)
}

/// [`check`] with an explicit relative step.
pub fn check_with_step<R, F>(
    name: &str,
    inputs: &[Tensor<f64>],
    samples: Option<usize>,
    tolerance: f64,
    step: f64,
    rng: &mut R,
    f: F,
) -> Result<GradcheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = f(&leaves)?.backward()?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();
    drop(leaves);

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = match samples {
        Some(k) if k < total => {
            let mut c = sample(rng, total, k).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..total).collect(),
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = perturbed.iter().cloned().map(Var::constant).collect();
        Ok(f(&vars)?.value().data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_err: 0.0,
        worst: None,
        tolerance,
    };
    for flat in coords {
        let (mut input, mut idx) = (0, flat);
        while idx >= sizes[input] {
            idx -= sizes[input];
            input += 1;
        }
        let x0 = inputs[input].data()[idx];
        let h = step * x0.abs().max(1.0);
        work[input].data_mut()[idx] = x0 + h;
        let up = eval(&work)?;
        work[input].data_mut()[idx] = x0 - h;
        let down = eval(&work)?;
        work[input].data_mut()[idx] = x0;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[input].data()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst = Some((input, idx, a, numeric));
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar through a fixed random projection, which
/// gives every output element an independent weight in the checked loss.
pub fn project(out: &Var<f64>, weights: &Tensor<f64>) -> Result<Var<f64>> {
    out.mul(&Var::constant(weights.clone())).map(|v| v.sum_all())
}
