use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::attack::{generate_pair, make_mask};
use crate::crm::{protect, recover, ProtectedBundle, ProtectionKey};
use crate::data::Image;
use crate::diffusion::ConditionEmbedding;
use crate::error::{Result, SiderError};
use crate::metrics::{write_protection_csv, write_quality_csv, ImageRole};
use crate::nn::write_atomic;

use super::config::PipelineConfig;
use super::evaluate::evaluate;
use super::manifest::RunManifest;
use super::stages::{
    build_dataset, load_crm, save_crm, train_crm_stage, train_diffusion, train_identity, training_triples,
    DiffusionModels, IdentityModels, Workspace,
};

/// Exit status for an error: 2 config or usage, 3 training abort,
/// 4 missing checkpoint, 5 corrupt bundle, 1 anything else.
pub fn exit_code(err: &SiderError) -> i32 {
    match err {
        SiderError::Config(_) | SiderError::Argument(_) => 2,
        SiderError::TrainingDiverged { .. } => 3,
        SiderError::MissingCheckpoint(_) => 4,
        SiderError::CorruptBundle(_) => 5,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sider", version, about = "Identity-preserving face protection with key-gated recovery")]
pub struct Cli {
    /// Run configuration (TOML or JSON, chosen by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed: replaces the training seed of the trained component, and
    /// seeds keys and auxiliary draws when protecting or evaluating.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a JSON object on stdout instead of plain text.
    #[arg(long, global = true)]
    pub json: bool,
    /// More logging on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    /// Autoencoder and latent denoiser.
    Denoiser,
    /// Recognition models and their thresholds.
    Embedders,
    /// Hiding network.
    Crm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one component and write its checkpoint.
    Train { component: Component },
    /// Protect a face image; prints the recovery key on stdout.
    Protect {
        input: PathBuf,
        /// Protected PNG; the sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Read the 32-hex-digit key from this file instead of generating one.
        #[arg(long)]
        key_file: Option<PathBuf>,
    },
    /// Recover from a protected bundle; prints AUTHORIZED or UNAUTHORIZED.
    Recover {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SIDER_KEY", hide_env_values = true)]
        key: Option<String>,
        #[arg(long, conflicts_with = "key")]
        key_file: Option<PathBuf>,
    },
    /// End-to-end evaluation on the test split.
    Evaluate {
        /// Add a covers-only run with the momentum term removed.
        #[arg(long)]
        ablate_momentum: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| SiderError::Config("--config is required".into()))?;
    PipelineConfig::load(path)
}

fn read_key_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map(|s| s.trim().to_string())
        .map_err(|e| SiderError::Argument(format!("cannot read key file {}: {e}", path.display())))
}

/// Salt for a caller-supplied key, fixed by the key and the run seed.
fn derived_salt(secret_hex: &str, seed: u64) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(b"sider/salt/v1");
    h.update(secret_hex.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize()[..16].try_into().expect("16 bytes")
}

fn emit(cli: &Cli, value: serde_json::Value, text: &str) {
    if cli.json {
        println!("{value}");
    } else {
        println!("{text}");
    }
}

fn cmd_train(cli: &Cli, component: Component) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let started = Instant::now();
    let ws = Workspace::new(&cfg.workdir);
    let data = build_dataset(&cfg.data)?;
    let name = match component {
        Component::Denoiser => "denoiser",
        Component::Embedders => "embedders",
        Component::Crm => "crm",
    };
    if let Some(s) = cli.seed {
        match component {
            Component::Denoiser => cfg.diffusion.seed = s,
            Component::Crm => cfg.crm.seed = s,
            Component::Embedders => log::warn!("embedders are seeded by their architecture index; --seed ignored"),
        }
    }
    let mut manifest = RunManifest::new(&format!("train {name}"), &cfg.hash()).seed("data", cfg.data.seed);
    let written = match component {
        Component::Denoiser => {
            manifest = manifest.seed("diffusion", cfg.diffusion.seed);
            let (m, _) = train_diffusion(&cfg, &data)?;
            m.save(&ws)?
        }
        Component::Embedders => {
            let (m, _) = train_identity(&cfg, &data)?;
            m.save(&ws)?
        }
        Component::Crm => {
            manifest = manifest.seed("crm", cfg.crm.seed);
            let diffusion = DiffusionModels::load(&ws, &cfg.diffusion)?;
            for p in [ws.autoencoder(), ws.denoiser()] {
                if p.is_file() {
                    manifest.checkpoint(&p)?;
                }
            }
            let triples = training_triples(&diffusion, &cfg, &data)?;
            let (crm, _) = train_crm_stage(&cfg, &triples)?;
            vec![save_crm(&crm, &ws)?]
        }
    };
    for p in &written {
        manifest.checkpoint(p)?;
    }
    manifest.outputs = written.clone();
    manifest.seconds = started.elapsed().as_secs_f64();
    manifest.save(&ws.manifest(&format!("train-{name}")))?;
    let files: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    emit(cli, json!({ "component": name, "checkpoints": manifest.checkpoints }), &files.join("\n"));
    Ok(())
}

fn cmd_protect(cli: &Cli, input: &Path, out: &Path, key_file: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let started = Instant::now();
    let seed = cli.seed.unwrap_or(0);
    let ws = Workspace::new(&cfg.workdir);
    let diffusion = DiffusionModels::load(&ws, &cfg.diffusion)?;
    let ids = IdentityModels::load(&ws, cfg.eval.embedders)?;
    let crm = load_crm(&ws)?;
    let x = Image::load(input)?;
    let res = cfg.data.resolution;
    if (x.width(), x.height()) != (res, res) {
        return Err(SiderError::Argument(format!(
            "{} is {}×{}; the models expect {res}×{res}",
            input.display(),
            x.width(),
            x.height()
        )));
    }
    let ensemble = ids.surrogates(None)?;
    let models = diffusion.attack_models(&ensemble);
    let attack_cfg = cfg.attack_config()?;
    let mask = make_mask(res, diffusion.codec.latent_shape(res), &attack_cfg.mask_mode)?;
    let cond = ConditionEmbedding::null(cfg.diffusion.cond_dim);
    let pair = generate_pair(models, &x, &cond, &attack_cfg, &mask)?;
    let key = match key_file {
        Some(f) => {
            let secret = read_key_file(f)?;
            ProtectionKey::from_hex(&secret, derived_salt(&secret, seed))?
        }
        None => ProtectionKey::generate(),
    };
    let bundle = protect(&crm, &pair.cover.quantize(), &pair.decoy.quantize(), &x.quantize(), &key, seed)?;
    bundle.save(out)?;
    let side = crate::crm::sidecar_path(out);
    let mut manifest = RunManifest::new("protect", &cfg.hash()).seed("run", seed);
    manifest.seeds.insert("attack_1".into(), attack_cfg.seed_pair.0);
    manifest.seeds.insert("attack_2".into(), attack_cfg.seed_pair.1);
    for p in [ws.denoiser(), ws.crm()] {
        manifest.checkpoint(&p)?;
    }
    manifest.outputs = vec![out.to_path_buf(), side.clone()];
    manifest.seconds = started.elapsed().as_secs_f64();
    manifest.save(&ws.manifest("protect"))?;
    emit(cli, json!({ "bundle": out, "sidecar": side, "key": key.secret_hex() }), &key.secret_hex());
    Ok(())
}

fn cmd_recover(cli: &Cli, bundle: &Path, out: &Path, key: Option<&str>, key_file: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.workdir);
    let crm = load_crm(&ws)?;
    let b = ProtectedBundle::load(bundle)?;
    let secret = match (key, key_file) {
        (Some(k), _) => Some(k.trim().to_string()),
        (None, Some(f)) => Some(read_key_file(f)?),
        (None, None) => None,
    };
    let key = secret.map(|s| ProtectionKey::from_hex(&s, b.header.salt()?)).transpose()?;
    let r = recover(&crm, &b, key.as_ref())?;
    r.image.save_png(out)?;
    emit(cli, json!({ "path": r.path, "output": out, "trace": r.trace }), &r.path.to_string());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, ablate: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let started = Instant::now();
    let seed = cli.seed.unwrap_or(0);
    let ws = Workspace::new(&cfg.workdir);
    let diffusion = DiffusionModels::load(&ws, &cfg.diffusion)?;
    let ids = IdentityModels::load(&ws, cfg.eval.embedders)?;
    let crm = load_crm(&ws)?;
    let data = build_dataset(&cfg.data)?;
    let report = evaluate(&cfg, &data, &diffusion, &ids, &crm, seed, ablate)?;
    let dir = ws.eval_dir();
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;
    let mut tables: Vec<_> = report.rotations.iter().map(|r| r.report.clone()).collect();
    tables.extend(report.ablation.iter().map(|r| {
        let mut t = r.report.clone();
        t.model_id = format!("{} (mu=0)", t.model_id);
        t
    }));
    write_protection_csv(&dir.join("protection.csv"), &tables)?;
    write_quality_csv(&dir.join("quality.csv"), &report.quality)?;
    let mut manifest = RunManifest::new("evaluate", &cfg.hash()).seed("run", seed).seed("data", cfg.data.seed);
    for p in [ws.denoiser(), ws.crm(), ws.thresholds()] {
        manifest.checkpoint(&p)?;
    }
    manifest.outputs = ["report.json", "protection.csv", "quality.csv"].iter().map(|f| dir.join(f)).collect();
    manifest.seconds = started.elapsed().as_secs_f64();
    manifest.save(&ws.manifest("evaluate"))?;

    let mut text = String::new();
    for r in &report.rotations {
        let cells: Vec<String> = ImageRole::ALL
            .iter()
            .map(|role| format!("{role} {:.1}%", r.report.asr(*role).unwrap_or(f64::NAN)))
            .collect();
        text.push_str(&format!("{}: {}\n", r.held_out, cells.join(", ")));
    }
    for r in &report.ablation {
        text.push_str(&format!(
            "{} mu=0: Cover {:.1}%\n",
            r.held_out,
            r.report.asr(ImageRole::Cover).unwrap_or(f64::NAN)
        ));
    }
    for q in &report.quality {
        text.push_str(&format!("{}: PSNR {:.2} dB, SSIM {:.4}\n", q.pair_tag, q.psnr, q.ssim));
    }
    emit(
        cli,
        json!({ "report": dir.join("report.json"), "hashes": report.hashes, "n_samples": report.n_samples }),
        text.trim_end(),
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { component } => cmd_train(cli, *component),
        Command::Protect { input, out, key_file } => cmd_protect(cli, input, out, key_file.as_deref()),
        Command::Recover { bundle, out, key, key_file } => {
            cmd_recover(cli, bundle, out, key.as_deref(), key_file.as_deref())
        }
        Command::Evaluate { ablate_momentum } => cmd_evaluate(cli, *ablate_momentum),
    }
}
