//! Latent codec, noise schedule, conditional ε-predictor and the DDIM sampler.

pub(crate) mod codec;
mod condition;
mod denoiser;
mod sampler;
mod schedule;

pub use codec::{train_autoencoder, Autoencoder, AutoencoderConfig, AutoencoderTraining, Codec, AUTOENCODER_KIND};
pub use condition::{AttributeConditions, ConditionEmbedding, ConditionProvider, LabelConditions, NullConditions};
pub use denoiser::{
    eps_mse, mean_condition_gap, train_denoiser, Denoiser, DenoiserConfig, DenoiserData, DenoiserTraining,
    NoisePredictor, OracleDenoiser, DENOISER_KIND,
};
pub use sampler::{
    ddim_step, ddim_step_var, forward_noise, guided_score, guided_score_var, sample_omega, sample_omega_var,
    GuidanceConfig, LatentCode,
};
pub use schedule::{make_schedule, NoiseSchedule};
