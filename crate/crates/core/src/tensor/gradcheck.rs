//! Central-difference gradient checking.
//!
//! Runs in f64 only: f32 central differences with h = 1e-5 drown in rounding
//! noise long before the 1e-4 test tolerances.

use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Tensor, TensorError, Var};

/// Compare the tape gradient of a scalar-valued function against central
/// differences `(f(x+h) - f(x-h)) / 2h` at every input coordinate.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Callers keep inputs away from nondifferentiable points (ReLU at 0).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut leaf = t.clone();
            leaf.requires_grad = true;
            leaf.grad = None;
            tape.leaf(leaf)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check: function must be scalar-valued, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe
            .iter()
            .map(|t| {
                let mut leaf = t.clone();
                leaf.requires_grad = false;
                leaf.grad = None;
                tape.leaf(leaf)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut max_rel = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for c in 0..inputs[i].numel() {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
