use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs of the accuracy-per-cost factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyInput {
    /// DSC gain in percentage points.
    pub ddsc: f64,
    /// Parameters, millions.
    pub param_m: f64,
    /// FLOPs, billions.
    pub flops_g: f64,
    /// Patch scaling factor (edge length relative to 80).
    pub eta: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl EfficiencyInput {
    pub fn new(ddsc: f64, param_m: f64, flops_g: f64, eta: f64) -> Self {
        Self {
            ddsc,
            param_m,
            flops_g,
            eta,
            lambda: 0.5,
            mu: 0.5,
        }
    }
}

/// `ΔDSC / (λ·Param + μ·FLOPs/η³)`.
pub fn efficiency_factor(input: &EfficiencyInput) -> Result<f64> {
    let i = input;
    if i.param_m < 0.0 || i.flops_g < 0.0 {
        return Err(Error::InvalidArgument("parameter and FLOP counts must be non-negative".into()));
    }
    if !(i.eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {}", i.eta)));
    }
    let denom = i.lambda * i.param_m + i.mu * i.flops_g / i.eta.powi(3);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!("efficiency denominator is {denom}")));
    }
    Ok(i.ddsc / denom)
}
