//! Latent-space identity-preserving attack: momentum sign steps on `z_T`
//! through the differentiable sampler and decoder.

mod mask;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mask::{make_mask, FaceMask, MaskMode};

use crate::data::Image;
use crate::diffusion::{
    forward_noise, sample_omega_var, Codec, ConditionEmbedding, GuidanceConfig, LatentCode, NoisePredictor,
    NoiseSchedule,
};
use crate::error::{Result, SiderError};
use crate::identity::{EnsembleConfig, IdentityEmbedding};
use crate::nn::{write_atomic, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    #[serde(rename = "N")]
    pub n_iter: usize,
    pub alpha: f64,
    pub mu: f64,
    pub guidance: GuidanceConfig,
    pub strength: f64,
    pub seed_pair: (u64, u64),
    pub mask_mode: MaskMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_iter: 30,
            alpha: 0.01,
            mu: 0.6,
            guidance: GuidanceConfig::default(),
            strength: 0.75,
            seed_pair: (1, 2),
            mask_mode: MaskMode::Oval,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SiderError::Argument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(SiderError::Argument(format!("mu must be nonnegative, got {}", self.mu)));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(SiderError::Argument(format!("strength must lie in (0, 1], got {}", self.strength)));
        }
        GuidanceConfig::new(self.guidance.s, self.guidance.lambda)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Everything the attack differentiates through. Parameters stay frozen.
#[derive(Clone, Copy)]
pub struct AttackModels<'a> {
    pub codec: &'a Codec,
    pub denoiser: &'a dyn NoisePredictor,
    pub ensemble: &'a EnsembleConfig,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub g: Tensor,
}

impl MomentumState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { g: Tensor::zeros(shape.to_vec()) }
    }
}

/// `μ·g_prev + grad/‖grad‖₁`.
pub fn momentum_step(prev: &MomentumState, grad: &Tensor, mu: f64) -> Result<MomentumState> {
    if prev.g.shape() != grad.shape() {
        return Err(SiderError::Shape(format!("momentum {:?} vs gradient {:?}", prev.g.shape(), grad.shape())));
    }
    let l1 = grad.l1_norm();
    if l1 == 0.0 {
        return Err(SiderError::DegenerateGradient);
    }
    Ok(MomentumState { g: prev.g.zip_map(grad, |g, d| mu * g + d / l1) })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `z − α·sign(M ⊙ g)` with the mask broadcast over channels. Off-mask
/// entries are copied, not recomputed.
pub fn masked_update(z: &Tensor, g: &Tensor, alpha: f64, mask: &FaceMask) -> Result<Tensor> {
    let s = z.shape();
    if s != g.shape() || s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(SiderError::Shape(format!(
            "latent {s:?}, momentum {:?}, mask {}×{}",
            g.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let plane = mask.height() * mask.width();
    let m = mask.values();
    let data = z
        .data()
        .iter()
        .zip(g.data())
        .enumerate()
        .map(|(i, (&zv, &gv))| if m[i % plane] == 0 { zv } else { zv - alpha * sign(gv) })
        .collect();
    Ok(Tensor::new(s.to_vec(), data))
}

/// Loss and `∇_{z_T}` of the ensemble loss of `decode(Ω(z_T))` against fixed
/// targets. The chain starts at `z_t.timestep`.
pub fn grad_zt(
    models: AttackModels<'_>,
    z_t: &LatentCode,
    targets: &[IdentityEmbedding],
    cond: &ConditionEmbedding,
    guidance: GuidanceConfig,
    iteration: usize,
) -> Result<(f64, Tensor)> {
    let g = Graph::new();
    let z = g.input(z_t.batched());
    let pd = models.denoiser.bind(&g);
    let pc = models.codec.bind(&g, false);
    let pe = models.ensemble.bind(&g);
    let z0 = sample_omega_var(models.denoiser, &pd, models.schedule, z, z_t.timestep, cond, guidance)?;
    let x = models.codec.decode_var(&pc, z0);
    let loss = models.ensemble.loss_var(&pe, x, targets);
    let value = loss.item();
    let grad = g.backward(loss).get_or_zeros(z).reshape(z_t.values.shape().to_vec());
    if !value.is_finite() || !grad.all_finite() {
        return Err(SiderError::NonFiniteGradient { iteration, loss: value });
    }
    Ok((value, grad))
}

/// Loss of `decode(Ω(z_T))` without the backward pass.
pub fn attack_loss(
    models: AttackModels<'_>,
    z_t: &LatentCode,
    targets: &[IdentityEmbedding],
    cond: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<f64> {
    let g = Graph::new();
    let pd = models.denoiser.bind(&g);
    let pc = models.codec.bind(&g, false);
    let pe = models.ensemble.bind(&g);
    let z0 = sample_omega_var(
        models.denoiser,
        &pd,
        models.schedule,
        g.constant(z_t.batched()),
        z_t.timestep,
        cond,
        guidance,
    )?;
    let x = models.codec.decode_var(&pc, z0);
    Ok(models.ensemble.loss_var(&pe, x, targets).item())
}

/// Image generated from a starting latent.
pub fn render(
    models: AttackModels<'_>,
    z_t: &LatentCode,
    cond: &ConditionEmbedding,
    guidance: GuidanceConfig,
) -> Result<Image> {
    let z0 = crate::diffusion::sample_omega(models.denoiser, models.schedule, z_t, z_t.timestep, cond, guidance)?;
    models.codec.decode(&z0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub init: LatentCode,
    pub z_star: LatentCode,
    /// Loss at each iterate, `z_0` through the returned latent.
    pub loss_trace: Vec<f64>,
    /// `‖g_k‖₁` after each momentum update.
    pub momentum_l1: Vec<f64>,
    /// Set when a zero gradient ended the run before `N` iterations.
    pub stalled_at: Option<usize>,
}

/// `z_T = forward_noise(encode(x), t_start, ε_seed)`.
pub fn initial_latent(models: AttackModels<'_>, x: &Image, strength: f64, seed: u64) -> Result<LatentCode> {
    let t_start = models.schedule.t_start(strength)?;
    let z0 = models.codec.encode(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(z0.values.shape().to_vec(), &mut rng);
    forward_noise(models.schedule, &z0, t_start, &eps)
}

/// Runs `N` momentum sign steps from the seeded initialization.
pub fn attack(
    models: AttackModels<'_>,
    x: &Image,
    cond: &ConditionEmbedding,
    config: &AttackConfig,
    mask: &FaceMask,
    seed: u64,
) -> Result<AttackRun> {
    config.validate()?;
    let init = initial_latent(models, x, config.strength, seed)?;
    let targets = models.ensemble.targets(x)?;
    let mut z = init.clone();
    let mut state = MomentumState::zeros(z.values.shape());
    let mut loss_trace = Vec::with_capacity(config.n_iter + 1);
    let mut momentum_l1 = Vec::with_capacity(config.n_iter);
    let mut stalled_at = None;
    for k in 0..config.n_iter {
        let (loss, grad) = grad_zt(models, &z, &targets, cond, config.guidance, k)?;
        loss_trace.push(loss);
        state = match momentum_step(&state, &grad, config.mu) {
            Ok(s) => s,
            Err(SiderError::DegenerateGradient) => {
                log::warn!("zero gradient at iteration {k}; stopping the attack early");
                stalled_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        momentum_l1.push(state.g.l1_norm());
        z = LatentCode::new(masked_update(&z.values, &state.g, config.alpha, mask)?, z.timestep);
    }
    if stalled_at.is_none() {
        loss_trace.push(attack_loss(models, &z, &targets, cond, config.guidance)?);
    }
    Ok(AttackRun { init, z_star: z, loss_trace, momentum_l1, stalled_at })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_1: u64,
    pub seed_2: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct AdversarialPair {
    pub cover: Image,
    pub decoy: Image,
    pub cover_run: AttackRun,
    pub decoy_run: AttackRun,
    pub provenance: Provenance,
}

/// Two attacks from independent noise draws; the first becomes the cover.
pub fn generate_pair(
    models: AttackModels<'_>,
    x: &Image,
    cond: &ConditionEmbedding,
    config: &AttackConfig,
    mask: &FaceMask,
) -> Result<AdversarialPair> {
    let (s1, s2) = config.seed_pair;
    if s1 == s2 {
        return Err(SiderError::SeedsMustDiffer);
    }
    let cover_run = attack(models, x, cond, config, mask, s1)?;
    let decoy_run = attack(models, x, cond, config, mask, s2)?;
    let cover = render(models, &cover_run.z_star, cond, config.guidance)?;
    let decoy = render(models, &decoy_run.z_star, cond, config.guidance)?;
    Ok(AdversarialPair {
        cover,
        decoy,
        cover_run,
        decoy_run,
        provenance: Provenance { seed_1: s1, seed_2: s2, config_hash: config.hash() },
    })
}

/// `iteration,loss` rows.
pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "iteration,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_faces_with, SynthOptions};
    use crate::diffusion::{Autoencoder, AutoencoderConfig, Denoiser, DenoiserConfig, OracleDenoiser};
    use crate::identity::Embedder;
    use proptest::prelude::*;

    struct Fixture {
        codec: Codec,
        denoiser: Denoiser,
        ensemble: EnsembleConfig,
        schedule: NoiseSchedule,
    }

    impl Fixture {
        fn new(res: usize) -> Self {
            let codec = Codec::Learned(Autoencoder::new(AutoencoderConfig::default(), 3));
            let denoiser = Denoiser::new(DenoiserConfig { width: 8, ..DenoiserConfig::default() }, 4);
            let models = (0..2).map(|s| Embedder::new(s, res).unwrap()).collect();
            let ensemble = EnsembleConfig::uniform(models).unwrap();
            Self { codec, denoiser, ensemble, schedule: NoiseSchedule::scaled_default(20).unwrap() }
        }

        fn models(&self) -> AttackModels<'_> {
            AttackModels {
                codec: &self.codec,
                denoiser: &self.denoiser,
                ensemble: &self.ensemble,
                schedule: &self.schedule,
            }
        }
    }

    fn face(seed: u64) -> Image {
        let opts = SynthOptions { resolution: 32, ..SynthOptions::default() };
        synth_faces_with(2, 1, seed, &opts).unwrap().samples()[0].pixels.clone()
    }

    fn cond() -> ConditionEmbedding {
        ConditionEmbedding::new(vec![0.3; 12])
    }

    #[test]
    fn momentum_without_memory_is_unit_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grad = Tensor::randn(vec![2, 3, 3], &mut rng);
        let prev = MomentumState { g: Tensor::randn(vec![2, 3, 3], &mut rng) };
        let g = momentum_step(&prev, &grad, 0.0).unwrap();
        assert!((g.g.l1_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_momentum_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g0 = Tensor::randn(vec![4, 2, 2], &mut rng);
        let unit = g0.scale(1.0 / g0.l1_norm());
        let prev = MomentumState { g: unit.clone() };
        let g = momentum_step(&prev, &g0.scale(g0.l1_norm()), 1.0).unwrap();
        assert!(g.g.max_abs_diff(&unit.scale(2.0)) < 1e-12);
    }

    #[test]
    fn alternating_momentum_is_bounded() {
        let mu = 0.9;
        let base = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let mut s = MomentumState::zeros(&[1, 2, 2]);
        for k in 0..200 {
            let grad = base.scale(if k % 2 == 0 { 1.0 } else { -1.0 });
            s = momentum_step(&s, &grad, mu).unwrap();
            let bound: f64 = (0..=k).map(|i| mu.powi(i)).sum();
            assert!(s.g.l1_norm() <= bound + 1e-12);
            assert!(s.g.l1_norm() <= 1.0 / (1.0 - mu));
        }
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let s = MomentumState::zeros(&[1, 2, 2]);
        let err = momentum_step(&s, &Tensor::zeros(vec![1, 2, 2]), 0.6).unwrap_err();
        assert!(err.to_string().contains("degenerate gradient"));
    }

    #[test]
    fn update_with_empty_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(vec![4, 4, 4], &mut rng);
        let g = Tensor::randn(vec![4, 4, 4], &mut rng);
        let out = masked_update(&z, &g, 0.1, &FaceMask::zeros(4, 4)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn update_with_positive_gradient_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(vec![2, 3, 3], &mut rng);
        let g = Tensor::full(vec![2, 3, 3], 0.7);
        let out = masked_update(&z, &g, 0.05, &FaceMask::ones(3, 3)).unwrap();
        for (a, b) in out.data().iter().zip(z.data()) {
            assert_eq!(*a, b - 0.05);
        }
    }

    proptest! {
        #[test]
        fn off_mask_unchanged_after_chained_updates(seed in 0u64..1000, bits in proptest::collection::vec(0u8..2, 16)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = FaceMask::new(4, 4, bits).unwrap();
            let z0 = Tensor::randn(vec![3, 4, 4], &mut rng);
            let mut z = z0.clone();
            for _ in 0..10 {
                let g = Tensor::randn(vec![3, 4, 4], &mut rng);
                z = masked_update(&z, &g, 0.01, &mask).unwrap();
            }
            for (i, (a, b)) in z.data().iter().zip(z0.data()).enumerate() {
                if mask.values()[i % 16] == 0 {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fx = Fixture::new(32);
        let x = &face(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentCode::new(Tensor::randn(vec![4, 8, 8], &mut rng), 3);
        let targets = fx.ensemble.targets(x).unwrap();
        let (_, grad) = grad_zt(fx.models(), &z, &targets, &cond(), GuidanceConfig::default(), 0).unwrap();
        assert_eq!(grad.shape(), z.values.shape());
        let h = 1e-3;
        for &i in &[0usize, 37, 101, 200, 255] {
            let eval = |d: f64| {
                let mut v = z.values.clone();
                v.data_mut()[i] += d;
                attack_loss(fx.models(), &LatentCode::new(v, 3), &targets, &cond(), GuidanceConfig::default()).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - grad.data()[i]).abs() / fd.abs().max(grad.data()[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "coordinate {i}: analytic {} fd {fd}", grad.data()[i]);
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_reconstruction() {
        let fx = Fixture::new(32);
        let z0 = fx.codec.encode(&face(10)).unwrap();
        let x = fx.codec.decode(&z0).unwrap();
        let oracle = OracleDenoiser { z0: z0.values.clone(), schedule: fx.schedule.clone() };
        let models = AttackModels { denoiser: &oracle, ..fx.models() };
        let targets = fx.ensemble.targets(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = Tensor::randn(vec![4, 8, 8], &mut rng);
        let z_t = forward_noise(&fx.schedule, &z0, 3, &eps).unwrap();
        let (loss, grad) = grad_zt(models, &z_t, &targets, &cond(), GuidanceConfig::default(), 0).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.l2_norm() < 1e-4);
    }

    #[test]
    fn attack_is_deterministic_and_respects_mask() {
        let fx = Fixture::new(32);
        let x = &face(11);
        let cfg = AttackConfig { n_iter: 3, strength: 0.15, ..AttackConfig::default() };
        let mask = make_mask(32, fx.codec.latent_shape(32), &MaskMode::Oval).unwrap();
        let a = attack(fx.models(), x, &cond(), &cfg, &mask, 7).unwrap();
        let b = attack(fx.models(), x, &cond(), &cfg, &mask, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 4);
        let plane = mask.height() * mask.width();
        for (i, (z, z0)) in a.z_star.values.data().iter().zip(a.init.values.data()).enumerate() {
            if mask.values()[i % plane] == 0 {
                assert_eq!(z.to_bits(), z0.to_bits());
            }
        }
        for (k, l1) in a.momentum_l1.iter().enumerate() {
            let bound: f64 = (0..=k).map(|i| cfg.mu.powi(i as i32)).sum();
            assert!(*l1 <= bound + 1e-12);
        }
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let fx = Fixture::new(32);
        let x = &face(12);
        let cfg = AttackConfig { n_iter: 0, strength: 0.15, ..AttackConfig::default() };
        let mask = FaceMask::ones(8, 8);
        let run = attack(fx.models(), x, &cond(), &cfg, &mask, 3).unwrap();
        assert_eq!(run.z_star, run.init);
        assert_eq!(run.init, initial_latent(fx.models(), x, 0.15, 3).unwrap());
    }

    #[test]
    fn pair_requires_distinct_seeds() {
        let fx = Fixture::new(32);
        let x = &face(13);
        let mask = FaceMask::ones(8, 8);
        let same = AttackConfig { n_iter: 1, seed_pair: (4, 4), ..AttackConfig::default() };
        let err = generate_pair(fx.models(), x, &cond(), &same, &mask).unwrap_err();
        assert!(err.to_string().contains("seeds must differ"));
        let cfg = AttackConfig { n_iter: 1, strength: 0.15, ..AttackConfig::default() };
        let pair = generate_pair(fx.models(), x, &cond(), &cfg, &mask).unwrap();
        assert!(pair.cover.data().iter().chain(pair.decoy.data()).all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(pair.cover, pair.decoy);
        assert_eq!(pair.provenance.config_hash, cfg.hash());
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_loss_csv(&p, &[0.5, 0.25]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "iteration,loss\n0,0.5\n1,0.25\n");
    }
}
