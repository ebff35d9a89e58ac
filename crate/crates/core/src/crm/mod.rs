//! Key-gated reversible hiding in the wavelet domain.

mod bundle;
mod inn;
mod key;
mod train;
mod wavelet;

pub use bundle::{
    protect, recover, sidecar_path, ungated_deep_recovery, BundleHeader, ProtectedBundle, Recovery, RecoveryPath,
    BUNDLE_VERSION,
};
pub use inn::{gaussian_aux, Crm, CrmConfig, KeyVars, CRM_KIND, PLANE_CHANNELS};
pub use key::{key_expand, key_rotation, ProtectionKey};
pub use train::{train_crm, CrmTraining, CrmTriple, LossWeights};
pub use wavelet::{dwt, dwt_tensor, idwt, WaveletPlanes};
