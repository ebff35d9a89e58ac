//! Small face embedders, verification thresholds and the ensemble identity loss.

mod embedder;
mod verify;

pub use embedder::{
    cos_sim, train_embedder, Embedder, EmbedderArch, EmbedderTraining, IdentityEmbedding, ARCH_TABLE, EMBEDDER_KIND,
    EMBED_DIM,
};
pub use verify::{
    accept_rate, attack_success, calibrate_threshold, ensemble_loss, ks_two_sample, pair_similarities,
    threshold_from_impostors, EnsembleConfig, VerificationThreshold, MIN_IMPOSTOR_PAIRS,
};
