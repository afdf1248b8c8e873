//! Finite-difference gradient checking.

use super::{Tape, Tensor, TensorId};
use crate::error::Result;

/// Shifts elements lying within `eps` of any kink point so central differences
/// do not straddle a non-smooth location (relu/abs at 0 and friends).
pub fn nudge_away_from_kinks(tensor: &mut Tensor, eps: f64, kinks: &[f64]) {
    for v in tensor.data_mut() {
        for &k in kinks {
            if (*v - k).abs() <= eps {
                *v = k + 2.0 * eps;
            }
        }
    }
}

/// Absolute agreement floor: central differences of an O(1) loss carry
/// rounding noise near |loss| * ulp / eps (about 1e-11), so gradients whose
/// analytic and numeric values both sit below this are treated as matching
/// zeros rather than scored by the relative formula.
pub const GRAD_CHECK_ATOL: f64 = 1e-9;

/// Compares tape gradients of a scalar-valued program against central finite
/// differences over every element of every input. Returns the maximum
/// relative error `|a - n| / max(1e-12, |a| + |n|)`, with sub-noise pairs
/// (see [`GRAD_CHECK_ATOL`]) counted as exact.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_sampled(build, inputs, eps, &all)
}

/// Same as [`grad_check`] but perturbing only the listed
/// `(input index, element index)` pairs.
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[Tensor],
    eps: f64,
    samples: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // Analytic gradients from one taped run.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |data: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = data.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let loss = build(&mut t, &ids)?;
        Ok(t.value(loss).item())
    };

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(ti, ei) in samples {
        let orig = work[ti].data()[ei];
        work[ti].data_mut()[ei] = orig + eps;
        let plus = eval(&work)?;
        work[ti].data_mut()[ei] = orig - eps;
        let minus = eval(&work)?;
        work[ti].data_mut()[ei] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[ti][ei];
        if a.abs() <= GRAD_CHECK_ATOL && numeric.abs() <= GRAD_CHECK_ATOL {
            continue;
        }
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
