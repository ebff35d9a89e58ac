use serde::{Deserialize, Serialize};

use super::condition::ConditionEmbedding;
use super::denoiser::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::{Result, SiderError};
use crate::nn::{Bound, Graph, Tensor, Var};

/// Latent `[C,h,w]` at a diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    pub timestep: usize,
}

impl LatentCode {
    pub fn new(values: Tensor, timestep: usize) -> Self {
        Self { values, timestep }
    }

    /// `[1,C,h,w]` view for the graph.
    pub fn batched(&self) -> Tensor {
        let mut s = vec![1];
        s.extend_from_slice(self.values.shape());
        self.values.clone().reshape(s)
    }
}

/// Guidance scale `s` and modulation `λ`; only the product `λ·s` matters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s: f64,
    pub lambda: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { s: 1.0, lambda: 3.0 }
    }
}

impl GuidanceConfig {
    pub fn new(s: f64, lambda: f64) -> Result<Self> {
        if !(s >= 0.0 && lambda >= 0.0) {
            return Err(SiderError::Argument(format!("guidance needs s ≥ 0 and λ ≥ 0, got s={s} λ={lambda}")));
        }
        Ok(Self { s, lambda })
    }

    pub fn effective(&self) -> f64 {
        self.lambda * self.s
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(schedule: &NoiseSchedule, z0: &LatentCode, t: usize, eps: &Tensor) -> Result<LatentCode> {
    schedule.check_t(t)?;
    if eps.shape() != z0.values.shape() {
        return Err(SiderError::Shape(format!("noise {:?} vs latent {:?}", eps.shape(), z0.values.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentCode::new(z0.values.zip_map(eps, |z, e| a * z + b * e), t))
}

fn cond_rows(c: &ConditionEmbedding, n: usize) -> Tensor {
    let row = c.values();
    Tensor::new(vec![n, row.len()], row.iter().copied().cycle().take(n * row.len()).collect())
}

/// `ε_∅ + λ·s·(ε_c − ε_∅)`. The null condition or a zero product skips the
/// conditional pass entirely, so the result is then exactly `ε_∅`.
pub fn guided_score_var<'g>(
    model: &dyn NoisePredictor,
    p: &Bound<'g>,
    z: Var<'g>,
    t: usize,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Var<'g> {
    let g = z.graph();
    let n = z.shape()[0];
    let null = ConditionEmbedding::null(c.dim());
    let w = guidance.effective();
    if w == 0.0 || c.is_null() {
        return model.predict(p, z, t, g.constant(cond_rows(&null, n)));
    }
    let both = g.cat(&[z, z], 0);
    let mut rows = cond_rows(c, n).into_data();
    rows.extend(cond_rows(&null, n).into_data());
    let e = model.predict(p, both, t, g.constant(Tensor::new(vec![2 * n, c.dim()], rows)));
    let (ec, eu) = (e.narrow(0, 0, n), e.narrow(0, n, n));
    eu.add(ec.sub(eu).scale(w))
}

/// One deterministic DDIM update from `t` to `t − 1` (ᾱ_0 = 1).
pub fn ddim_step_var<'g>(
    model: &dyn NoisePredictor,
    p: &Bound<'g>,
    schedule: &NoiseSchedule,
    z: Var<'g>,
    t: usize,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<Var<'g>> {
    if t == 0 {
        return Err(SiderError::AlreadyDenoised(t));
    }
    schedule.check_t(t)?;
    let eps = guided_score_var(model, p, z, t, c, guidance);
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let x0 = z.sub(eps.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt());
    if t == 1 {
        return Ok(x0);
    }
    Ok(x0.scale(ab_prev.sqrt()).add(eps.scale((1.0 - ab_prev).sqrt())))
}

/// The composite map Ω: DDIM steps from `t_start` down to 0.
pub fn sample_omega_var<'g>(
    model: &dyn NoisePredictor,
    p: &Bound<'g>,
    schedule: &NoiseSchedule,
    z_t: Var<'g>,
    t_start: usize,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<Var<'g>> {
    schedule.check_t(t_start)?;
    let mut z = z_t;
    for t in (1..=t_start).rev() {
        z = ddim_step_var(model, p, schedule, z, t, c, guidance)?;
    }
    Ok(z)
}

pub fn guided_score(
    model: &dyn NoisePredictor,
    z: &LatentCode,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Tensor {
    let g = Graph::new();
    let p = model.bind(&g);
    let e = guided_score_var(model, &p, g.constant(z.batched()), z.timestep, c, guidance);
    e.to_tensor().reshape(z.values.shape().to_vec())
}

pub fn ddim_step(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z: &LatentCode,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<LatentCode> {
    let g = Graph::new();
    let p = model.bind(&g);
    let out = ddim_step_var(model, &p, schedule, g.constant(z.batched()), z.timestep, c, guidance)?;
    Ok(LatentCode::new(out.to_tensor().reshape(z.values.shape().to_vec()), z.timestep - 1))
}

pub fn sample_omega(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_t: &LatentCode,
    t_start: usize,
    c: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<LatentCode> {
    let g = Graph::new();
    let p = model.bind(&g);
    let out = sample_omega_var(model, &p, schedule, g.constant(z_t.batched()), t_start, c, guidance)?;
    Ok(LatentCode::new(out.to_tensor().reshape(z_t.values.shape().to_vec()), 0))
}
