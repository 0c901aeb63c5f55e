//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only ever evaluates the forward function; it never consults a
//! tape's backward pass.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Numerical gradient of a scalar function of several tensors.
pub fn finite_difference(
    inputs: &[Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..g.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Fraction of the largest gradient norm in a check used as the denominator
/// floor of the relative error.
pub const NORM_FLOOR: f64 = 1e-9;

/// Per-entry resolution of a central difference of `f` with step `eps`: the
/// quotient cannot resolve gradients smaller than the roundoff in `f` divided
/// by the step. The factor 16 covers roundoff accumulated over a forward pass.
pub fn resolution(f: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * f.abs().max(1.0) / eps
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / (norm(a) + norm(b)).max(floor)
}

/// Runs `f` on a tape with every input as a gradient-tracking leaf, then
/// compares its backward pass with central differences. Returns the worst
/// per-input relative error.
pub fn check_op(
    inputs: &[Tensor],
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let f0 = tape.value(out).data()[0];
    let numeric = finite_difference(inputs, eps, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    })?;
    Ok(worst_relative_error(&analytic, &numeric, resolution(f0, eps)))
}

/// Worst per-tensor relative error.
///
/// Some gradients vanish exactly (attention key biases under softmax shift
/// invariance; per-token constant shifts that a downstream layer norm
/// removes). A tensor whose analytic and numeric gradients both lie within
/// `resolution` per entry is a verified zero and scores 0; every other tensor
/// is compared by [`relative_error`] with a floor of [`NORM_FLOOR`] times the
/// largest gradient norm present.
pub fn worst_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], resolution: f64) -> f64 {
    let scale = analytic.iter().chain(numeric).map(|g| norm(g)).fold(0.0, f64::max);
    let floor = (NORM_FLOOR * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let tol = resolution * (a.len() as f64).sqrt();
            if norm(a) <= tol && norm(n) <= tol {
                0.0
            } else {
                relative_error(a, n, floor)
            }
        })
        .fold(0.0, f64::max)
}
