//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Denominator floor of the relative error, so exactly-zero gradients are
/// compared in absolute terms instead of dividing by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        bail!(Contract, "gradient check needs a scalar-valued function");
    }
    Ok(out.item())
}

/// Largest relative error between tape gradients and central differences,
/// over every element of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        bail!(Contract, "finite-difference step must be positive");
    }
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let plus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - step;
            let minus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), step)
}

/// Reduce a tensor-valued output to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
pub fn project<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let weights = Tensor::from_fn(&shape, |i| {
        ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5
    });
    v.mul(&tape.constant(weights)?)?.sum()
}
