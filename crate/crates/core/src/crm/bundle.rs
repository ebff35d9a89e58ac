//! Protected-image bundles.
//!
//! A bundle is an 8-bit RGB PNG `x.png` plus a sidecar `x.sider.json`:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "key_salt":   32 hex digits (16 bytes, public),
//!   "commitment": 64 hex digits, HMAC-SHA256(key, "sider/commit/v1" || salt),
//!   "aux_seed":   u64 seeding the Gaussian stand-ins used at recovery,
//!   "width", "height": pixel size of the PNG
//! }
//! ```
//!
//! The key itself is never stored.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inn::{gaussian_aux, Crm};
use super::key::ProtectionKey;
use super::wavelet::{dwt, idwt};
use crate::data::Image;
use crate::error::{Result, SiderError};
use crate::nn::write_atomic;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format_version: u32,
    pub key_salt: String,
    pub commitment: String,
    pub aux_seed: u64,
    pub width: usize,
    pub height: usize,
}

impl BundleHeader {
    pub fn salt(&self) -> Result<[u8; 16]> {
        let raw = hex::decode(&self.key_salt).map_err(|e| SiderError::CorruptBundle(format!("key_salt: {e}")))?;
        raw.try_into().map_err(|_| SiderError::CorruptBundle("key_salt must be 16 bytes".into()))
    }

    pub fn commitment_bytes(&self) -> Result<[u8; 32]> {
        let raw = hex::decode(&self.commitment).map_err(|e| SiderError::CorruptBundle(format!("commitment: {e}")))?;
        raw.try_into().map_err(|_| SiderError::CorruptBundle("commitment must be 32 bytes".into()))
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_VERSION {
            return Err(SiderError::CorruptBundle(format!("unsupported format_version {}", self.format_version)));
        }
        self.salt()?;
        self.commitment_bytes()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedBundle {
    pub x_hat: Image,
    pub header: BundleHeader,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("sider.json")
}

impl ProtectedBundle {
    pub fn save(&self, png: &Path) -> Result<()> {
        self.x_hat.save_png(png)?;
        let mut json = serde_json::to_vec_pretty(&self.header)?;
        json.push(b'\n');
        write_atomic(&sidecar_path(png), &json)
    }

    pub fn load(png: &Path) -> Result<Self> {
        let side = sidecar_path(png);
        let raw = std::fs::read(&side)
            .map_err(|e| SiderError::CorruptBundle(format!("cannot read {}: {e}", side.display())))?;
        let header: BundleHeader =
            serde_json::from_slice(&raw).map_err(|e| SiderError::CorruptBundle(format!("{}: {e}", side.display())))?;
        header.validate()?;
        let x_hat = Image::load(png)?;
        if (x_hat.width(), x_hat.height()) != (header.width, header.height) {
            return Err(SiderError::CorruptBundle(format!(
                "header says {}×{}, image is {}×{}",
                header.width,
                header.height,
                x_hat.width(),
                x_hat.height()
            )));
        }
        Ok(Self { x_hat, header })
    }
}

/// Nests `secret` under `cover` with `key`, then `decoy` on top. The result
/// is quantized to 8 bits, exactly as it is stored.
pub fn protect(
    crm: &Crm,
    cover: &Image,
    decoy: &Image,
    secret: &Image,
    key: &ProtectionKey,
    aux_seed: u64,
) -> Result<ProtectedBundle> {
    if !cover.same_shape(decoy) || !cover.same_shape(secret) {
        return Err(SiderError::Shape("cover, decoy and secret must share a size".into()));
    }
    if !crm.is_trained() {
        log::warn!("protecting with an untrained hiding network; recovery quality is not guaranteed");
    }
    let (h, _) = crm.deep_embed(&dwt(cover)?, &dwt(secret)?, key)?;
    let (p, _) = crm.shallow_embed(&h, &dwt(decoy)?)?;
    let x_hat = Image::from_tensor(&idwt(&p))?.quantize();
    let header = BundleHeader {
        format_version: BUNDLE_VERSION,
        key_salt: hex::encode(key.salt()),
        commitment: hex::encode(key.commitment()),
        aux_seed,
        width: cover.width(),
        height: cover.height(),
    };
    Ok(ProtectedBundle { x_hat, header })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecoveryPath {
    Authorized,
    Unauthorized,
}

impl fmt::Display for RecoveryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Authorized => "AUTHORIZED",
            Self::Unauthorized => "UNAUTHORIZED",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    pub image: Image,
    pub path: RecoveryPath,
    /// Inversion stages in the order they ran.
    pub trace: Vec<&'static str>,
}

/// Peels the shallow layer, then the deep one only if `key` opens the
/// commitment. Only the secret bits of `key` are used; the salt comes from
/// the header.
pub fn recover(crm: &Crm, bundle: &ProtectedBundle, key: Option<&ProtectionKey>) -> Result<Recovery> {
    bundle.header.validate()?;
    let planes = dwt(&bundle.x_hat)?;
    let [_, h, w] = planes.ll.shape().try_into().expect("three axes");
    let mut rng = ChaCha8Rng::seed_from_u64(bundle.header.aux_seed);
    let mut trace = vec!["shallow_invert"];
    let (inter, decoy) = crm.shallow_invert(&planes, &gaussian_aux(&mut rng, h, w))?;
    let salt = bundle.header.salt()?;
    let commitment = bundle.header.commitment_bytes()?;
    match key.map(|k| k.with_salt(salt)).filter(|k| k.verify(&commitment)) {
        Some(k) => {
            trace.push("deep_invert");
            let (_, secret) = crm.deep_invert(&inter, &k, &gaussian_aux(&mut rng, h, w))?;
            Ok(Recovery { image: Image::from_tensor(&idwt(&secret))?, path: RecoveryPath::Authorized, trace })
        }
        None => Ok(Recovery { image: Image::from_tensor(&idwt(&decoy))?, path: RecoveryPath::Unauthorized, trace }),
    }
}

/// Deep inversion under `key` with no commitment check, showing what an
/// arbitrary key would extract. Uses the same auxiliary draws as [`recover`].
pub fn ungated_deep_recovery(crm: &Crm, bundle: &ProtectedBundle, key: &ProtectionKey) -> Result<Image> {
    let planes = dwt(&bundle.x_hat)?;
    let [_, h, w] = planes.ll.shape().try_into().expect("three axes");
    let mut rng = ChaCha8Rng::seed_from_u64(bundle.header.aux_seed);
    let (inter, _) = crm.shallow_invert(&planes, &gaussian_aux(&mut rng, h, w))?;
    let (_, secret) = crm.deep_invert(&inter, key, &gaussian_aux(&mut rng, h, w))?;
    Image::from_tensor(&idwt(&secret))
}
