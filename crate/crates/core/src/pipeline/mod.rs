//! Configuration, stage orchestration, evaluation and the command line.

mod cli;
mod config;
mod evaluate;
mod manifest;
mod stages;

pub use cli::{exit_code, run, Cli};
pub use config::{
    AttackBlock, CodecKind, ConditionKind, CrmBlock, DataConfig, DiffusionConfig, EvalConfig, PipelineConfig,
    CONFIG_SCHEMA_VERSION, REQUIRED_BLOCKS,
};
pub use evaluate::{evaluate, test_sources, EvaluationReport, RotationResult, EVAL_SCHEMA_VERSION};
pub use manifest::{file_sha256, RunManifest};
pub use stages::{
    build_dataset, condition_provider, embedder_id, load_crm, regenerated_triple, save_crm, train_crm_stage,
    train_diffusion, train_identity, training_triples, DiffusionModels, IdentityModels, TrainingHistory, Workspace,
};
