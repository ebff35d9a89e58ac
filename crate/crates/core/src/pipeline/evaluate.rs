use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, generate_pair, make_mask, render, AttackConfig};
use crate::crm::{protect, recover, ungated_deep_recovery, Crm, ProtectionKey};
use crate::data::{hash_images, DatasetManifest, Image, ImageSample, Split};
use crate::error::{Result, SiderError};
use crate::metrics::{protection_report, quality_report, ImageRole, ProtectionReport, QualityReport};

use super::config::PipelineConfig;
use super::stages::{condition_provider, embedder_id, DiffusionModels, IdentityModels};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// First image of each test identity, at most `limit` of them.
pub fn test_sources(data: &DatasetManifest, limit: usize) -> Vec<&ImageSample> {
    let mut seen = std::collections::BTreeSet::new();
    data.split_samples(Split::Test).into_iter().filter(|s| seen.insert(s.identity_id)).take(limit).collect()
}

/// Scores against one held-out model, attacking the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    pub held_out: String,
    pub mu: f64,
    pub report: ProtectionReport,
    /// Held-out cosine similarity of each cover to its source.
    pub cover_similarity: Vec<f64>,
    /// Last entry of each cover attack's loss trace.
    pub final_loss: Vec<f64>,
    pub median_final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub rotations: Vec<RotationResult>,
    /// Same protocol with the momentum term removed (`mu = 0`), covers only.
    pub ablation: Vec<RotationResult>,
    /// Per-tag means over every rotation.
    pub quality: Vec<QualityReport>,
    /// SHA-256 over the 8-bit form of each output image set.
    pub hashes: BTreeMap<String, String>,
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn cover_similarity(ids: &IdentityModels, h: usize, covers: &[Image], sources: &[Image]) -> Result<Vec<f64>> {
    let m = &ids.embedders[h];
    covers.iter().zip(sources).map(|(c, x)| Ok(crate::identity::cos_sim(&m.embed(c)?, &m.embed(x)?))).collect()
}

/// Covers-only run used for the momentum ablation.
fn covers_only(
    diffusion: &DiffusionModels,
    ids: &IdentityModels,
    h: usize,
    samples: &[&ImageSample],
    cfg: &PipelineConfig,
    attack_cfg: &AttackConfig,
) -> Result<RotationResult> {
    let ensemble = ids.surrogates(Some(h))?;
    let models = diffusion.attack_models(&ensemble);
    let provider = condition_provider(&cfg.diffusion);
    let res = cfg.data.resolution;
    let mask = make_mask(res, diffusion.codec.latent_shape(res), &attack_cfg.mask_mode)?;
    let (mut covers, mut losses) = (Vec::new(), Vec::new());
    for s in samples {
        let cond = provider.condition(s);
        let run = attack(models, &s.pixels, &cond, attack_cfg, &mask, attack_cfg.seed_pair.0)?;
        covers.push(render(models, &run.z_star, &cond, attack_cfg.guidance)?.quantize());
        losses.push(*run.loss_trace.last().expect("non-empty trace"));
    }
    let sources: Vec<Image> = samples.iter().map(|s| s.pixels.clone()).collect();
    let t = &ids.thresholds[h];
    let report = protection_report(
        &[(ImageRole::Cover, &covers)],
        &sources,
        &ids.embedders[h],
        &t.model_id,
        t.tau,
        &cfg.hash(),
    )?;
    Ok(RotationResult {
        held_out: embedder_id(h),
        mu: attack_cfg.mu,
        report,
        cover_similarity: cover_similarity(ids, h, &covers, &sources)?,
        median_final_loss: median(&losses),
        final_loss: losses,
    })
}

/// Attack → protect → both recoveries on the test split, rotating the
/// held-out model. `seed` drives the protection keys and auxiliary seeds.
pub fn evaluate(
    cfg: &PipelineConfig,
    data: &DatasetManifest,
    diffusion: &DiffusionModels,
    ids: &IdentityModels,
    crm: &Crm,
    seed: u64,
    ablate_momentum: bool,
) -> Result<EvaluationReport> {
    let samples = test_sources(data, cfg.eval.test_images);
    if samples.is_empty() {
        return Err(SiderError::Config("the test split is empty".into()));
    }
    let attack_cfg = cfg.attack_config()?;
    let provider = condition_provider(&cfg.diffusion);
    let res = cfg.data.resolution;
    let mask = make_mask(res, diffusion.codec.latent_shape(res), &attack_cfg.mask_mode)?;
    let sources: Vec<Image> = samples.iter().map(|s| s.pixels.clone()).collect();
    let held: Vec<usize> =
        if cfg.eval.rotate { (0..ids.embedders.len()).collect() } else { vec![ids.embedders.len() - 1] };
    let config_hash = cfg.hash();

    let mut rotations = Vec::new();
    let mut sets: BTreeMap<&str, Vec<Image>> = BTreeMap::new();
    let mut pairs: Vec<(Image, Image, &str)> = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for &h in &held {
        let ensemble = ids.surrogates(Some(h))?;
        let models = diffusion.attack_models(&ensemble);
        let (mut covers, mut decoys, mut protected, mut unauth, mut losses) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, s) in samples.iter().enumerate() {
            let cond = provider.condition(s);
            let pair = generate_pair(models, &s.pixels, &cond, &attack_cfg, &mask)?;
            let (cover, decoy) = (pair.cover.quantize(), pair.decoy.quantize());
            let secret = s.pixels.quantize();
            let key = ProtectionKey::generate_with(&mut rng);
            let wrong = ProtectionKey::generate_with(&mut rng);
            let bundle = protect(crm, &cover, &decoy, &secret, &key, seed.wrapping_add(i as u64))?;
            let open = recover(crm, &bundle, Some(&key))?.image.quantize();
            let closed = recover(crm, &bundle, None)?.image.quantize();
            let forced = ungated_deep_recovery(crm, &bundle, &wrong)?.quantize();
            pairs.push((bundle.x_hat.clone(), cover.clone(), "protected/cover"));
            pairs.push((open.clone(), secret.clone(), "authorized/secret"));
            pairs.push((closed.clone(), decoy.clone(), "unauthorized/decoy"));
            pairs.push((forced, secret, "wrong-key/secret"));
            sets.entry("authorized").or_default().push(open);
            losses.push(*pair.cover_run.loss_trace.last().expect("non-empty trace"));
            covers.push(cover);
            decoys.push(decoy);
            protected.push(bundle.x_hat);
            unauth.push(closed);
        }
        let t = &ids.thresholds[h];
        let report = protection_report(
            &[
                (ImageRole::Cover, &covers),
                (ImageRole::Decoy, &decoys),
                (ImageRole::Hidden, &protected),
                (ImageRole::RecoveryUnauthorized, &unauth),
            ],
            &sources,
            &ids.embedders[h],
            &t.model_id,
            t.tau,
            &config_hash,
        )?;
        log::info!("held out {}: cover ASR {:.1}%", t.model_id, report.asr(ImageRole::Cover).unwrap_or(f64::NAN));
        rotations.push(RotationResult {
            held_out: embedder_id(h),
            mu: attack_cfg.mu,
            report,
            cover_similarity: cover_similarity(ids, h, &covers, &sources)?,
            median_final_loss: median(&losses),
            final_loss: losses,
        });
        sets.entry("covers").or_default().extend(covers);
        sets.entry("decoys").or_default().extend(decoys);
        sets.entry("protected").or_default().extend(protected);
        sets.entry("unauthorized").or_default().extend(unauth);
    }

    let mut ablation = Vec::new();
    if ablate_momentum {
        let no_mom = AttackConfig { mu: 0.0, ..attack_cfg.clone() };
        for &h in &held {
            ablation.push(covers_only(diffusion, ids, h, &samples, cfg, &no_mom)?);
        }
    }

    let refs: Vec<(&Image, &Image, &str)> = pairs.iter().map(|(a, b, t)| (a, b, *t)).collect();
    let (_, quality) = quality_report(&refs)?;
    let hashes = sets.iter().map(|(k, v)| (k.to_string(), hash_images(v))).collect();
    Ok(EvaluationReport {
        schema_version: EVAL_SCHEMA_VERSION,
        config_hash,
        seed,
        n_samples: samples.len(),
        rotations,
        ablation,
        quality,
        hashes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
