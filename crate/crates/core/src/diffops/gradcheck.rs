use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared on absolute error.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar graph with central
/// differences over every element of every input.
///
/// `build` receives a fresh tape and one leaf per input and must return a
/// scalar.
pub fn grad_check<F>(op: &str, build: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_wrt(op, build, inputs, &vec![true; inputs.len()], tolerance)
}

/// Like [`grad_check`] but only probes inputs with `wrt[k]` set; the
/// others are still fed to `build` as gradient-free constants.
pub fn grad_check_wrt<F>(op: &str, build: F, inputs: &[Tensor<f64>], wrt: &[bool], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if wrt.len() != inputs.len() {
        return Err(shape_err("grad_check", format!("{} wrt flags for {} inputs", wrt.len(), inputs.len())));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(shape_err("grad_check", format!("non-scalar output {:?}", tape.shape(out))));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(v, &w)| if w { tape.param(v.clone()) } else { tape.constant(v.clone()) })
        .collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate().filter(|(k, _)| wrt[*k]) {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(err);
            }
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}
