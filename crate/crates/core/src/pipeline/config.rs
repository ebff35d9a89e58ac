//! Run configuration. Files are TOML (`.toml`) or JSON (anything else).
//! The five blocks `data`, `diffusion`, `attack`, `crm` and `eval` must be
//! present; every field inside a block has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, MaskMode};
use crate::crm::{CrmConfig, CrmTraining, LossWeights};
use crate::data::SplitPlan;
use crate::diffusion::{make_schedule, GuidanceConfig, NoiseSchedule};
use crate::error::{Result, SiderError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REQUIRED_BLOCKS: [&str; 5] = ["data", "diffusion", "attack", "crm", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Checkpoints, manifests and reports go here.
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub attack: AttackBlock,
    pub crm: CrmBlock,
    pub eval: EvalConfig,
}

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_workdir() -> PathBuf {
    PathBuf::from("sider-run")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `"synthetic"` or a directory with one sub-directory per identity.
    pub source: String,
    pub resolution: usize,
    pub identities: usize,
    pub per_identity: usize,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            resolution: 64,
            identities: 200,
            per_identity: 8,
            val: 0.25,
            test: 0.25,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan { val: self.val, test: self.test }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Autoencoder,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Attributes,
    Labels,
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    /// Both or neither; defaults to the reference range stretched to `T`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub strength: f64,
    pub s: f64,
    pub lambda: f64,
    pub codec: CodecKind,
    pub condition: ConditionKind,
    pub cond_dim: usize,
    pub ae_width: usize,
    pub latent_channels: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub denoiser_epochs: usize,
    pub denoiser_lr: f64,
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            beta_min: None,
            beta_max: None,
            strength: 0.75,
            s: 1.0,
            lambda: 3.0,
            codec: CodecKind::Autoencoder,
            condition: ConditionKind::Attributes,
            cond_dim: crate::data::IDENTITY_DIM,
            ae_width: 8,
            latent_channels: 4,
            ae_epochs: 12,
            ae_lr: 3e-3,
            denoiser_width: 16,
            denoiser_blocks: 1,
            denoiser_epochs: 30,
            denoiser_lr: 2e-3,
            p_drop: 0.2,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match (self.beta_min, self.beta_max) {
            (None, None) => NoiseSchedule::scaled_default(self.steps),
            (Some(lo), Some(hi)) => make_schedule(self.steps, lo, hi),
            _ => Err(SiderError::Config("diffusion.beta_min and diffusion.beta_max go together".into())),
        }
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.s, self.lambda).map_err(|e| SiderError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackBlock {
    #[serde(rename = "N")]
    pub n_iter: usize,
    pub alpha: f64,
    pub mu: f64,
    /// `oval`, `full` or `external` (with `mask_path`).
    pub mask_mode: String,
    pub mask_path: Option<PathBuf>,
    pub seeds: (u64, u64),
}

impl Default for AttackBlock {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            n_iter: a.n_iter,
            alpha: a.alpha,
            mu: a.mu,
            mask_mode: "oval".into(),
            mask_path: None,
            seeds: a.seed_pair,
        }
    }
}

impl AttackBlock {
    pub fn mask(&self) -> Result<MaskMode> {
        match (self.mask_mode.as_str(), &self.mask_path) {
            ("oval", _) => Ok(MaskMode::Oval),
            ("full", _) => Ok(MaskMode::Full),
            ("external", Some(p)) => Ok(MaskMode::External(p.clone())),
            ("external", None) => Err(SiderError::Config("attack.mask_path is required for an external mask".into())),
            (other, _) => {
                Err(SiderError::Config(format!("attack.mask_mode must be oval, full or external, got {other:?}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrmBlock {
    pub deep_blocks: usize,
    pub shallow_blocks: usize,
    pub width: usize,
    pub clamp: f64,
    pub key_channels: usize,
    pub weights: LossWeights,
    pub wrong_key: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training triples drawn from the training split.
    pub triples: usize,
    pub seed: u64,
}

impl Default for CrmBlock {
    fn default() -> Self {
        let c = CrmConfig::default();
        let t = CrmTraining::default();
        Self {
            deep_blocks: c.deep_blocks,
            shallow_blocks: c.shallow_blocks,
            width: c.width,
            clamp: c.clamp,
            key_channels: c.key_channels,
            weights: t.weights,
            wrong_key: t.wrong_key,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            triples: 200,
            seed: 0,
        }
    }
}

impl CrmBlock {
    pub fn model(&self) -> CrmConfig {
        CrmConfig {
            deep_blocks: self.deep_blocks,
            shallow_blocks: self.shallow_blocks,
            width: self.width,
            clamp: self.clamp,
            key_channels: self.key_channels,
        }
    }

    pub fn training(&self) -> CrmTraining {
        CrmTraining {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weights: self.weights,
            wrong_key: self.wrong_key,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub far_target: f64,
    pub embedders: usize,
    pub embedder_epochs: usize,
    pub embedder_lr: f64,
    /// Upper bound on test images (one per test identity).
    pub test_images: usize,
    /// Hold out each embedder in turn; otherwise only the last one.
    pub rotate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { far_target: 0.01, embedders: 4, embedder_epochs: 20, embedder_lr: 3e-3, test_images: 50, rotate: true }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SiderError::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::parse(&text, is_toml)
    }

    pub fn parse(text: &str, is_toml: bool) -> Result<Self> {
        let value: serde_json::Value = if is_toml {
            let t: toml::Value = toml::from_str(text).map_err(|e| SiderError::Config(e.to_string()))?;
            serde_json::to_value(t)?
        } else {
            serde_json::from_str(text).map_err(|e| SiderError::Config(e.to_string()))?
        };
        let obj = value.as_object().ok_or_else(|| SiderError::Config("config must be a table".into()))?;
        for key in REQUIRED_BLOCKS {
            if !obj.contains_key(key) {
                return Err(SiderError::Config(format!("missing required key `{key}`")));
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| SiderError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SiderError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let d = &self.data;
        if d.resolution < 8 || !d.resolution.is_power_of_two() {
            return bad(format!("data.resolution must be a power of two ≥ 8, got {}", d.resolution));
        }
        if d.identities < 2 || d.per_identity == 0 {
            return bad("data needs ≥ 2 identities with ≥ 1 image each".into());
        }
        if !(d.val >= 0.0 && d.test >= 0.0 && d.val + d.test < 1.0) {
            return bad("data.val + data.test must lie in [0, 1)".into());
        }
        self.diffusion.schedule().map_err(|e| SiderError::Config(e.to_string()))?;
        self.diffusion.guidance()?;
        if !(self.diffusion.strength > 0.0 && self.diffusion.strength <= 1.0) {
            return bad(format!("diffusion.strength must lie in (0, 1], got {}", self.diffusion.strength));
        }
        if !(0.0..=1.0).contains(&self.diffusion.p_drop) {
            return bad("diffusion.p_drop must lie in [0, 1]".into());
        }
        self.attack_config()?.validate().map_err(|e| SiderError::Config(e.to_string()))?;
        if self.crm.deep_blocks == 0 || self.crm.shallow_blocks == 0 || self.crm.width == 0 {
            return bad("crm stacks need ≥ 1 block and a positive width".into());
        }
        if !(self.eval.far_target > 0.0 && self.eval.far_target < 1.0) {
            return bad(format!("eval.far_target must lie in (0, 1), got {}", self.eval.far_target));
        }
        if self.eval.embedders < 2 {
            return bad("eval.embedders must be ≥ 2 (one held out, the rest attacked)".into());
        }
        Ok(())
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let a = &self.attack;
        Ok(AttackConfig {
            n_iter: a.n_iter,
            alpha: a.alpha,
            mu: a.mu,
            guidance: self.diffusion.guidance()?,
            strength: self.diffusion.strength,
            seed_pair: a.seeds,
            mask_mode: a.mask()?,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\n[diffusion]\n[attack]\n[crm]\n[eval]\n";

    #[test]
    fn defaults_fill_empty_blocks() {
        let c = PipelineConfig::parse(MINIMAL, true).unwrap();
        assert_eq!(c.attack.alpha, 0.01);
        assert_eq!(c.attack.mu, 0.6);
        assert_eq!(c.diffusion.steps, 20);
        assert_eq!(c.diffusion.strength, 0.75);
        assert_eq!(c.diffusion.guidance().unwrap().effective(), 3.0);
        assert_eq!(c.attack.n_iter, 30);
        assert_eq!(c.eval.far_target, 0.01);
    }

    #[test]
    fn missing_block_is_named() {
        let err = PipelineConfig::parse("[data]\n[diffusion]\n[attack]\n[eval]\n", true).unwrap_err();
        assert!(err.to_string().contains("`crm`"), "{err}");
    }

    #[test]
    fn json_and_toml_agree() {
        let j = r#"{"data": {"resolution": 32}, "diffusion": {"T": 10}, "attack": {"N": 5}, "crm": {}, "eval": {}}"#;
        let t = "[data]\nresolution = 32\n[diffusion]\nT = 10\n[attack]\nN = 5\n[crm]\n[eval]\n";
        let (a, b) = (PipelineConfig::parse(j, false).unwrap(), PipelineConfig::parse(t, true).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "[data]\nresolution = 48\n[diffusion]\n[attack]\n[crm]\n[eval]\n",
            "[data]\n[diffusion]\nstrength = 0.0\n[attack]\n[crm]\n[eval]\n",
            "[data]\n[diffusion]\n[attack]\nalpha = -1.0\n[crm]\n[eval]\n",
            "[data]\n[diffusion]\n[attack]\nmask_mode = \"external\"\n[crm]\n[eval]\n",
            "[data]\n[diffusion]\n[attack]\n[crm]\n[eval]\nbogus = 1\n",
        ] {
            assert!(matches!(PipelineConfig::parse(bad, true), Err(SiderError::Config(_))), "{bad}");
        }
    }
}
