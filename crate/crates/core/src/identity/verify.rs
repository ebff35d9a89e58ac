use serde::{Deserialize, Serialize};

use super::embedder::{cos_sim, Embedder, IdentityEmbedding};
use crate::data::{hash_images, ImageSample};
use crate::error::{Result, SiderError};
use crate::nn::{Bound, Graph, Var};

pub const MIN_IMPOSTOR_PAIRS: usize = 100;

/// Embedders with nonnegative weights normalized to sum to one.
#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    models: Vec<Embedder>,
    weights: Vec<f64>,
}

impl EnsembleConfig {
    pub fn new(models: Vec<Embedder>, weights: Vec<f64>) -> Result<Self> {
        if models.is_empty() {
            return Err(SiderError::Argument("ensemble needs at least one model".into()));
        }
        if weights.len() != models.len() {
            return Err(SiderError::Argument(format!("{} weights for {} models", weights.len(), models.len())));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || total <= 0.0 {
            return Err(SiderError::Argument("weights must be nonnegative with a positive sum".into()));
        }
        Ok(Self { models, weights: weights.iter().map(|w| w / total).collect() })
    }

    pub fn uniform(models: Vec<Embedder>) -> Result<Self> {
        let n = models.len();
        Self::new(models, vec![1.0; n])
    }

    pub fn models(&self) -> &[Embedder] {
        &self.models
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Bound<'g>> {
        self.models.iter().map(|m| m.bind(g)).collect()
    }

    /// Reference embeddings of the source image, one per model.
    pub fn targets(&self, x: &crate::data::Image) -> Result<Vec<IdentityEmbedding>> {
        self.models.iter().map(|m| m.embed(x)).collect()
    }

    /// `Σ w_f (1 − cos(f(x_gen), f(x)))` for a `[1,3,H,W]` image node.
    pub fn loss_var<'g>(&self, bound: &[Bound<'g>], x_gen: Var<'g>, targets: &[IdentityEmbedding]) -> Var<'g> {
        let g = x_gen.graph();
        let mut total: Option<Var<'g>> = None;
        for ((m, p), (w, t)) in self.models.iter().zip(bound).zip(self.weights.iter().zip(targets)) {
            let cos = m.embed_var(p, x_gen).row_dot(g.constant(t.to_tensor())).sum();
            let term = cos.scale(-*w).add_scalar(*w);
            total = Some(match total {
                Some(acc) => acc.add(term),
                None => term,
            });
        }
        total.expect("ensemble is nonempty")
    }
}

/// Ensemble identity loss between two images.
pub fn ensemble_loss(ens: &EnsembleConfig, x_gen: &crate::data::Image, x: &crate::data::Image) -> Result<f64> {
    let targets = ens.targets(x)?;
    let g = Graph::new();
    let bound = ens.bind(&g);
    let xg = g.constant(x_gen.to_tensor().reshape(vec![1, 3, x_gen.height(), x_gen.width()]));
    Ok(ens.loss_var(&bound, xg, &targets).item())
}

/// Calibrated acceptance threshold of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub model_id: String,
    pub tau: f64,
    pub far_target: f64,
    pub n_pairs: usize,
    pub data_hash: String,
}

/// Smallest observed similarity τ such that at most a `far` fraction of
/// impostors score above it: the k-th largest value, k = ⌈far·n⌉.
pub fn threshold_from_impostors(impostor: &[f64], far: f64) -> Result<f64> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(SiderError::Argument(format!("FAR target {far} outside (0, 1]")));
    }
    if impostor.len() < MIN_IMPOSTOR_PAIRS {
        return Err(SiderError::InsufficientPairs { found: impostor.len(), needed: MIN_IMPOSTOR_PAIRS });
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((far * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// Genuine and impostor similarity lists over all unordered pairs.
pub fn pair_similarities(embeddings: &[IdentityEmbedding], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let s = cos_sim(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    (genuine, impostor)
}

pub fn calibrate_threshold(
    model: &Embedder,
    model_id: &str,
    samples: &[&ImageSample],
    far_target: f64,
) -> Result<VerificationThreshold> {
    let labels: Vec<usize> = samples.iter().map(|s| s.identity_id).collect();
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(SiderError::TooFewIdentities(distinct));
    }
    let embs = model.embed_all(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
    let (_, impostor) = pair_similarities(&embs, &labels);
    Ok(VerificationThreshold {
        model_id: model_id.to_string(),
        tau: threshold_from_impostors(&impostor, far_target)?,
        far_target,
        n_pairs: impostor.len(),
        data_hash: hash_images(samples.iter().map(|s| &s.pixels)),
    })
}

/// Percentage of similarities at or above `tau` (identity preserved).
pub fn attack_success(sims: &[f64], tau: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(SiderError::NoData("no similarities to score".into()));
    }
    Ok(100.0 * sims.iter().filter(|s| **s >= tau).count() as f64 / sims.len() as f64)
}

/// Fraction of `genuine` similarities accepted at `tau`.
pub fn accept_rate(genuine: &[f64], tau: f64) -> f64 {
    if genuine.is_empty() {
        return 0.0;
    }
    genuine.iter().filter(|s| **s >= tau).count() as f64 / genuine.len() as f64
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
