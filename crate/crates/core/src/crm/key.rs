use std::fmt;

use hmac::{Hmac, Mac};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::Sha256;

use crate::error::{Result, SiderError};
use crate::nn::Tensor;

type HmacSha256 = Hmac<Sha256>;

const COMMIT_LABEL: &[u8] = b"sider/commit/v1";
const EXPAND_LABEL: &[u8] = b"sider/expand/v1";
const MIX_LABEL: &[u8] = b"sider/mix/v1";

/// 128-bit secret plus a public salt. The secret never leaves the process
/// except through [`ProtectionKey::secret_hex`].
#[derive(Clone, PartialEq, Eq)]
pub struct ProtectionKey {
    bits: [u8; 16],
    salt: [u8; 16],
}

impl fmt::Debug for ProtectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProtectionKey").field("salt", &hex::encode(self.salt)).finish_non_exhaustive()
    }
}

impl ProtectionKey {
    /// Fresh key from the operating-system-seeded generator.
    pub fn generate() -> Self {
        Self::generate_with(&mut rand::rng())
    }

    pub fn generate_with<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bits = [0u8; 16];
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut bits);
        rng.fill_bytes(&mut salt);
        Self { bits, salt }
    }

    pub fn from_parts(bits: [u8; 16], salt: [u8; 16]) -> Self {
        Self { bits, salt }
    }

    /// Parses 32 hex digits of secret against a known salt.
    pub fn from_hex(secret: &str, salt: [u8; 16]) -> Result<Self> {
        let raw = hex::decode(secret.trim()).map_err(|e| SiderError::Argument(format!("key is not hex: {e}")))?;
        let bits: [u8; 16] =
            raw.try_into().map_err(|_| SiderError::Argument("key must be 128 bits (32 hex digits)".into()))?;
        Ok(Self { bits, salt })
    }

    /// Same secret under another salt.
    pub fn with_salt(&self, salt: [u8; 16]) -> Self {
        Self { bits: self.bits, salt }
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.bits)
    }

    pub fn salt(&self) -> [u8; 16] {
        self.salt
    }

    fn mac(&self, label: &[u8]) -> HmacSha256 {
        let mut m = HmacSha256::new_from_slice(&self.bits).expect("hmac takes any key length");
        m.update(label);
        m.update(&self.salt);
        m
    }

    /// Salted MAC stored in bundle headers.
    pub fn commitment(&self) -> [u8; 32] {
        self.mac(COMMIT_LABEL).finalize().into_bytes().into()
    }

    /// Constant-time check against a stored commitment.
    pub fn verify(&self, commitment: &[u8]) -> bool {
        self.mac(COMMIT_LABEL).verify_slice(commitment).is_ok()
    }
}

fn keyed_rng(key: &ProtectionKey, label: &[u8]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(key.mac(label).finalize().into_bytes().into())
}

/// Keyed pseudorandom tensor, standardized to zero mean and unit variance.
pub fn key_expand(key: &ProtectionKey, shape: &[usize]) -> Tensor {
    let mut rng = keyed_rng(key, EXPAND_LABEL);
    let n: usize = shape.iter().product();
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let inv = 1.0 / var.sqrt().max(1e-12);
    Tensor::new(shape.to_vec(), raw.iter().map(|v| (v - mean) * inv).collect())
}

/// Keyed block-diagonal orthogonal matrix with one random rotation per block
/// (Gram–Schmidt on Gaussian rows).
pub fn key_rotation(key: &ProtectionKey, blocks: &[usize]) -> Tensor {
    let mut rng = keyed_rng(key, MIX_LABEL);
    let n: usize = blocks.iter().sum();
    let mut out = vec![0.0; n * n];
    let mut off = 0;
    for &m in blocks {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
        while rows.len() < m {
            let mut v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for r in &rows {
                let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, a)| *x -= d * a);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        for (i, r) in rows.iter().enumerate() {
            out[(off + i) * n + off..(off + i) * n + off + m].copy_from_slice(r);
        }
        off += m;
    }
    Tensor::new(vec![n, n], out)
}
