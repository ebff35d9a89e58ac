use serde::{Deserialize, Serialize};

use crate::error::{Result, SiderError};

/// Linear β ramp over `T` steps and its cumulative products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// β range of the usual 1000-step linear schedule.
pub const REFERENCE_BETA: (f64, f64) = (1e-4, 0.02);
pub const REFERENCE_STEPS: usize = 1000;

pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(SiderError::Argument("schedule needs T ≥ 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(SiderError::Argument(format!("need 0 < beta_min ≤ beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| if t == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64 })
        .collect();
    let alpha_bar = beta
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    /// The reference β range stretched so `t` steps cover the same noise levels.
    pub fn scaled_default(t: usize) -> Result<Self> {
        let k = REFERENCE_STEPS as f64 / t.max(1) as f64;
        let (lo, hi) = REFERENCE_BETA;
        make_schedule(t, (lo * k).min(0.5), (hi * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// ᾱ_t for `t ∈ 0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            Err(SiderError::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Denoising strength σ ∈ (0, 1] to the first timestep, `round(σ·T)`, at least 1.
    pub fn t_start(&self, strength: f64) -> Result<usize> {
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(SiderError::Argument(format!("strength {strength} outside (0, 1]")));
        }
        Ok(((strength * self.steps() as f64).round() as usize).max(1))
    }
}
