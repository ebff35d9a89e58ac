use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::AttackModels;
use crate::crm::{train_crm, Crm, CrmTriple};
use crate::data::{load_dataset, synth_faces_with, DatasetManifest, Image, ImageSample, Split, SynthOptions};
use crate::diffusion::{
    forward_noise, sample_omega, train_autoencoder, train_denoiser, AttributeConditions, Autoencoder,
    AutoencoderConfig, AutoencoderTraining, Codec, ConditionEmbedding, ConditionProvider, Denoiser, DenoiserConfig,
    DenoiserData, DenoiserTraining, LabelConditions, NoiseSchedule, NullConditions,
};
use crate::error::{Result, SiderError};
use crate::identity::{
    calibrate_threshold, train_embedder, Embedder, EmbedderTraining, EnsembleConfig, VerificationThreshold,
};
use crate::nn::{write_atomic, Checkpoint, Tensor};

use super::config::{CodecKind, ConditionKind, DataConfig, DiffusionConfig, PipelineConfig};

/// File layout under the configured working directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.checkpoints().join("autoencoder.ckpt")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.checkpoints().join("denoiser.ckpt")
    }

    pub fn embedder(&self, i: usize) -> PathBuf {
        self.checkpoints().join(format!("embedder-{i}.ckpt"))
    }

    pub fn thresholds(&self) -> PathBuf {
        self.checkpoints().join("thresholds.json")
    }

    pub fn crm(&self) -> PathBuf {
        self.checkpoints().join("crm.ckpt")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SiderError::MissingCheckpoint(path.to_path_buf()))
    }
}

pub fn build_dataset(cfg: &DataConfig) -> Result<DatasetManifest> {
    if cfg.source == "synthetic" {
        let opts = SynthOptions { resolution: cfg.resolution, split: cfg.split_plan(), ..SynthOptions::default() };
        synth_faces_with(cfg.identities, cfg.per_identity, cfg.seed, &opts)
    } else {
        load_dataset(Path::new(&cfg.source), cfg.resolution, cfg.seed)?.resplit(cfg.split_plan(), cfg.seed)
    }
}

pub fn condition_provider(cfg: &DiffusionConfig) -> Box<dyn ConditionProvider> {
    let dim = cfg.cond_dim;
    match cfg.condition {
        ConditionKind::Attributes => Box::new(AttributeConditions { dim }),
        ConditionKind::Labels => Box::new(LabelConditions { dim }),
        ConditionKind::Null => Box::new(NullConditions { dim }),
    }
}

/// Codec, denoiser and schedule: everything needed to render a latent.
#[derive(Clone, Debug)]
pub struct DiffusionModels {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl DiffusionModels {
    pub fn attack_models<'a>(&'a self, ensemble: &'a EnsembleConfig) -> AttackModels<'a> {
        AttackModels { codec: &self.codec, denoiser: &self.denoiser, ensemble, schedule: &self.schedule }
    }

    pub fn save(&self, ws: &Workspace) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        if let Codec::Learned(ae) = &self.codec {
            ae.to_checkpoint().save(&ws.autoencoder())?;
            out.push(ws.autoencoder());
        }
        self.denoiser.to_checkpoint().save(&ws.denoiser())?;
        out.push(ws.denoiser());
        Ok(out)
    }

    pub fn load(ws: &Workspace, cfg: &DiffusionConfig) -> Result<Self> {
        let codec = match cfg.codec {
            CodecKind::Identity => Codec::Identity,
            CodecKind::Autoencoder => {
                require(&ws.autoencoder())?;
                Codec::Learned(Autoencoder::from_checkpoint(&Checkpoint::load(&ws.autoencoder())?)?)
            }
        };
        require(&ws.denoiser())?;
        let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(&ws.denoiser())?)?;
        Ok(Self { codec, denoiser, schedule: cfg.schedule()? })
    }
}

/// Per-epoch losses of each trained part, keyed by name.
pub type TrainingHistory = Vec<(String, Vec<f64>)>;

fn split_images(data: &DatasetManifest, split: Split) -> Result<Vec<&ImageSample>> {
    let s = data.split_samples(split);
    if s.is_empty() {
        return Err(SiderError::NoData(format!("{split:?} split is empty")));
    }
    Ok(s)
}

/// Autoencoder (when configured) then denoiser, both on the training split.
pub fn train_diffusion(cfg: &PipelineConfig, data: &DatasetManifest) -> Result<(DiffusionModels, TrainingHistory)> {
    let d = &cfg.diffusion;
    let train = split_images(data, Split::Train)?;
    let images: Vec<&Image> = train.iter().map(|s| &s.pixels).collect();
    let mut history = Vec::new();
    let codec = match d.codec {
        CodecKind::Identity => Codec::Identity,
        CodecKind::Autoencoder => {
            let ae_cfg = AutoencoderConfig { width: d.ae_width, latent_channels: d.latent_channels };
            let tr = AutoencoderTraining {
                epochs: d.ae_epochs,
                lr: d.ae_lr,
                seed: d.seed,
                ..AutoencoderTraining::default()
            };
            let (ae, h) = train_autoencoder(&images, ae_cfg, &tr)?;
            history.push(("autoencoder".to_string(), h));
            Codec::Learned(ae)
        }
    };
    let latents: Vec<Tensor> = images.iter().map(|x| codec.encode(x).map(|z| z.values)).collect::<Result<_>>()?;
    let provider = condition_provider(d);
    let conditions: Vec<Vec<f64>> = train.iter().map(|s| provider.condition(s).values().to_vec()).collect();
    let schedule = d.schedule()?;
    let den_cfg = DenoiserConfig {
        latent_channels: latents[0].dim(0),
        width: d.denoiser_width,
        blocks: d.denoiser_blocks,
        cond_dim: d.cond_dim,
    };
    let tr = DenoiserTraining {
        epochs: d.denoiser_epochs,
        lr: d.denoiser_lr,
        p_drop: d.p_drop,
        seed: d.seed,
        ..DenoiserTraining::default()
    };
    let (denoiser, h) =
        train_denoiser(&DenoiserData { latents: &latents, conditions: &conditions }, &schedule, den_cfg, &tr)?;
    history.push(("denoiser".to_string(), h));
    Ok((DiffusionModels { codec, denoiser, schedule }, history))
}

/// Trained recognition models with their calibrated thresholds, index-aligned.
#[derive(Clone, Debug)]
pub struct IdentityModels {
    pub embedders: Vec<Embedder>,
    pub thresholds: Vec<VerificationThreshold>,
}

pub fn embedder_id(i: usize) -> String {
    format!("embedder-{i}")
}

impl IdentityModels {
    pub fn save(&self, ws: &Workspace) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (i, e) in self.embedders.iter().enumerate() {
            e.to_checkpoint().save(&ws.embedder(i))?;
            out.push(ws.embedder(i));
        }
        let mut json = serde_json::to_vec_pretty(&self.thresholds)?;
        json.push(b'\n');
        write_atomic(&ws.thresholds(), &json)?;
        out.push(ws.thresholds());
        Ok(out)
    }

    pub fn load(ws: &Workspace, n: usize) -> Result<Self> {
        let embedders = (0..n)
            .map(|i| {
                require(&ws.embedder(i))?;
                Embedder::from_checkpoint(&Checkpoint::load(&ws.embedder(i))?)
            })
            .collect::<Result<Vec<_>>>()?;
        require(&ws.thresholds())?;
        let thresholds: Vec<VerificationThreshold> = serde_json::from_slice(&std::fs::read(ws.thresholds())?)
            .map_err(|e| SiderError::Checkpoint(format!("thresholds.json: {e}")))?;
        if thresholds.len() != n {
            return Err(SiderError::Checkpoint(format!("{} thresholds for {n} embedders", thresholds.len())));
        }
        Ok(Self { embedders, thresholds })
    }

    /// Uniform ensemble of every model except `held_out`.
    pub fn surrogates(&self, held_out: Option<usize>) -> Result<EnsembleConfig> {
        let models: Vec<Embedder> =
            self.embedders.iter().enumerate().filter(|(i, _)| Some(*i) != held_out).map(|(_, e)| e.clone()).collect();
        EnsembleConfig::uniform(models)
    }
}

/// Embedder `i` uses architecture seed `i`; thresholds come from the
/// validation split.
pub fn train_identity(cfg: &PipelineConfig, data: &DatasetManifest) -> Result<(IdentityModels, TrainingHistory)> {
    let train = split_images(data, Split::Train)?;
    let val = split_images(data, Split::Val)?;
    let tr =
        EmbedderTraining { epochs: cfg.eval.embedder_epochs, lr: cfg.eval.embedder_lr, ..EmbedderTraining::default() };
    let (mut embedders, mut thresholds, mut history) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.eval.embedders {
        let (e, h) = train_embedder(&train, i as u64, &tr)?;
        let t = calibrate_threshold(&e, &embedder_id(i), &val, cfg.eval.far_target)?;
        log::info!("{}: tau {:.4} from {} impostor pairs", t.model_id, t.tau, t.n_pairs);
        history.push((embedder_id(i), h));
        embedders.push(e);
        thresholds.push(t);
    }
    Ok((IdentityModels { embedders, thresholds }, history))
}

/// Cover and decoy rendered from two noised copies of the source without
/// adversarial optimization; the source is the secret. Stands in for attack
/// outputs when training the hiding network.
pub fn regenerated_triple(
    models: &DiffusionModels,
    cfg: &PipelineConfig,
    x: &Image,
    cond: &ConditionEmbedding,
    seeds: (u64, u64),
) -> Result<CrmTriple> {
    let guidance = cfg.diffusion.guidance()?;
    let t_start = models.schedule.t_start(cfg.diffusion.strength)?;
    let z0 = models.codec.encode(x)?;
    let draw = |seed| -> Result<Image> {
        let eps = Tensor::randn(z0.values.shape().to_vec(), &mut ChaCha8Rng::seed_from_u64(seed));
        let zt = forward_noise(&models.schedule, &z0, t_start, &eps)?;
        let z = sample_omega(&models.denoiser, &models.schedule, &zt, t_start, cond, guidance)?;
        Ok(models.codec.decode(&z)?.quantize())
    };
    Ok(CrmTriple { cover: draw(seeds.0)?, decoy: draw(seeds.1)?, secret: x.quantize() })
}

/// `cfg.crm.triples` regenerated triples cycling over the training split.
pub fn training_triples(
    models: &DiffusionModels,
    cfg: &PipelineConfig,
    data: &DatasetManifest,
) -> Result<Vec<CrmTriple>> {
    let train = split_images(data, Split::Train)?;
    let provider = condition_provider(&cfg.diffusion);
    let base = cfg.crm.seed.wrapping_mul(1 << 20);
    (0..cfg.crm.triples)
        .map(|i| {
            let s = train[i % train.len()];
            let seeds = (base + 2 * i as u64, base + 2 * i as u64 + 1);
            regenerated_triple(models, cfg, &s.pixels, &provider.condition(s), seeds)
        })
        .collect()
}

pub fn train_crm_stage(cfg: &PipelineConfig, triples: &[CrmTriple]) -> Result<(Crm, Vec<f64>)> {
    let (mut crm, h) = train_crm(Crm::new(cfg.crm.model(), cfg.crm.seed), triples, &cfg.crm.training())?;
    crm.round_params();
    Ok((crm, h))
}

pub fn save_crm(crm: &Crm, ws: &Workspace) -> Result<PathBuf> {
    crm.to_checkpoint().save(&ws.crm())?;
    Ok(ws.crm())
}

pub fn load_crm(ws: &Workspace) -> Result<Crm> {
    require(&ws.crm())?;
    Crm::from_checkpoint(&Checkpoint::load(&ws.crm())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::parse("[data]\n[diffusion]\n[attack]\n[crm]\n[eval]\n", true).unwrap();
        c.data = DataConfig { resolution: 16, identities: 12, per_identity: 2, ..DataConfig::default() };
        c.diffusion.steps = 4;
        c.diffusion.ae_epochs = 1;
        c.diffusion.denoiser_epochs = 1;
        c.diffusion.denoiser_width = 4;
        c.diffusion.ae_width = 4;
        c.crm.triples = 3;
        c
    }

    #[test]
    fn diffusion_roundtrip_through_workspace() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        assert!(matches!(DiffusionModels::load(&ws, &cfg.diffusion), Err(SiderError::MissingCheckpoint(_))));
        let data = build_dataset(&cfg.data).unwrap();
        let (m, hist) = train_diffusion(&cfg, &data).unwrap();
        assert_eq!(hist.len(), 2);
        m.save(&ws).unwrap();
        let back = DiffusionModels::load(&ws, &cfg.diffusion).unwrap();
        let triples = training_triples(&back, &cfg, &data).unwrap();
        assert_eq!(triples.len(), 3);
        assert_eq!(triples[0].cover.width(), 16);
        assert_ne!(triples[0].cover, triples[0].decoy);
    }

    #[test]
    fn missing_embedder_named() {
        let dir = tempfile::tempdir().unwrap();
        match IdentityModels::load(&Workspace::new(dir.path()), 2) {
            Err(SiderError::MissingCheckpoint(p)) => assert!(p.ends_with("embedder-0.ckpt")),
            other => panic!("{other:?}"),
        }
    }
}
