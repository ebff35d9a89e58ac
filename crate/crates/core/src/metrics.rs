//! Image-quality and identity-preservation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Result, SiderError};
use crate::identity::{attack_success, cos_sim, Embedder};
use crate::nn::write_atomic;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(SiderError::Shape(format!("{}×{} vs {}×{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(f64::sqrt)
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 8, k1: 0.01, k2: 0.03 }
    }
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SsimConfig::default())
}

/// Mean SSIM over all `window×window` patches at stride 1, averaged over
/// channels. Patch statistics use population moments.
pub fn ssim_with(a: &Image, b: &Image, cfg: SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h, k) = (a.width(), a.height(), cfg.window);
    if k == 0 || w < k || h < k {
        return Err(SiderError::Argument(format!("image {w}×{h} is smaller than the {k}×{k} SSIM window")));
    }
    let (c1, c2) = ((cfg.k1).powi(2), (cfg.k2).powi(2));
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let at = |img: &Image, x: usize, y: usize| img.data()[(y * w + x) * 3 + ch] as f64;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (u, v) = (at(a, x, y), at(b, x, y));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pair_tag: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub rmse: f64,
}

impl QualityReport {
    /// Metrics on the 8-bit renderings of both images.
    pub fn measure(a: &Image, b: &Image, tag: &str) -> Result<Self> {
        let (a, b) = (a.quantize(), b.quantize());
        let m = mse(&a, &b)?;
        Ok(Self { pair_tag: tag.to_string(), psnr: psnr_from_mse(m), ssim: ssim(&a, &b)?, mse: m, rmse: m.sqrt() })
    }
}

/// One report per pair, then the per-tag means in tag order.
pub fn quality_report(pairs: &[(&Image, &Image, &str)]) -> Result<(Vec<QualityReport>, Vec<QualityReport>)> {
    if pairs.is_empty() {
        return Err(SiderError::NoData("no image pairs to measure".into()));
    }
    let each: Vec<QualityReport> =
        pairs.iter().map(|(a, b, t)| QualityReport::measure(a, b, t)).collect::<Result<_>>()?;
    let mut groups: BTreeMap<&str, Vec<&QualityReport>> = BTreeMap::new();
    for r in &each {
        groups.entry(r.pair_tag.as_str()).or_default().push(r);
    }
    let agg = groups
        .into_iter()
        .map(|(tag, rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&QualityReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            QualityReport {
                pair_tag: tag.to_string(),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                mse: mean(|r| r.mse),
                rmse: mean(|r| r.rmse),
            }
        })
        .collect();
    Ok((each, agg))
}

/// Which image a similarity score was measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImageRole {
    Cover,
    Decoy,
    /// The protected image carrying the hidden layers.
    Hidden,
    #[serde(rename = "Recovery-Unauthorized")]
    RecoveryUnauthorized,
}

impl ImageRole {
    pub const ALL: [ImageRole; 4] = [Self::Cover, Self::Decoy, Self::Hidden, Self::RecoveryUnauthorized];
}

impl fmt::Display for ImageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cover => "Cover",
            Self::Decoy => "Decoy",
            Self::Hidden => "Hidden",
            Self::RecoveryUnauthorized => "Recovery-Unauthorized",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleAsr {
    pub role: ImageRole,
    pub asr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub model_id: String,
    pub tau: f64,
    pub n_samples: usize,
    pub config_hash: String,
    pub rows: Vec<RoleAsr>,
}

impl ProtectionReport {
    pub fn asr(&self, role: ImageRole) -> Option<f64> {
        self.rows.iter().find(|r| r.role == role).map(|r| r.asr)
    }
}

/// Percentage of each role's images whose held-out similarity to the source
/// stays at or above `tau`.
pub fn protection_report(
    sets: &[(ImageRole, &[Image])],
    sources: &[Image],
    model: &Embedder,
    model_id: &str,
    tau: f64,
    config_hash: &str,
) -> Result<ProtectionReport> {
    let refs = sources.iter().map(|s| model.embed(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(sets.len());
    for (role, images) in sets {
        if images.len() != sources.len() {
            return Err(SiderError::Argument(format!("{role}: {} images for {} sources", images.len(), sources.len())));
        }
        let sims = images
            .iter()
            .zip(&refs)
            .map(|(img, r)| model.embed(img).map(|e| cos_sim(&e, r)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RoleAsr { role: *role, asr: attack_success(&sims, tau)? });
    }
    Ok(ProtectionReport {
        model_id: model_id.to_string(),
        tau,
        n_samples: sources.len(),
        config_hash: config_hash.to_string(),
        rows,
    })
}

pub fn write_quality_csv(path: &Path, reports: &[QualityReport]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "pair_tag,psnr,ssim,mse,rmse")?;
    for r in reports {
        writeln!(out, "{},{},{},{},{}", r.pair_tag, r.psnr, r.ssim, r.mse, r.rmse)?;
    }
    write_atomic(path, &out)
}

pub fn write_protection_csv(path: &Path, reports: &[ProtectionReport]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "model_id,role,asr,tau,n_samples,config_hash")?;
    for r in reports {
        for row in &r.rows {
            writeln!(out, "{},{},{},{},{},{}", r.model_id, row.role, row.asr, r.tau, r.n_samples, r.config_hash)?;
        }
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::threshold_from_impostors;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(8, 8, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = Image::filled(8, 8, [0.51; 3]);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-4);
        assert!(psnr(&a, &Image::filled(4, 8, [0.5; 3])).is_err());
    }

    #[test]
    fn ssim_identity_and_extremes() {
        let a = noise(1, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let zero = Image::filled(16, 16, [0.0; 3]);
        let one = Image::filled(16, 16, [1.0; 3]);
        let v = ssim(&zero, &one).unwrap();
        // both patches constant: (c1)(c2) / ((1 + c1)(c2))
        let c1 = 0.01f64.powi(2);
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(v < 0.05);
        assert!(ssim(&Image::filled(4, 4, [0.0; 3]), &Image::filled(4, 4, [0.0; 3])).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (noise(s1, 10), noise(s2, 10));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn rmse_squares_to_mse(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (noise(s1, 8), noise(s2, 8));
            let r = QualityReport::measure(&a, &b, "x").unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() < 1e-12);
            prop_assert!((r.psnr - psnr_from_mse(r.mse)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_aggregates() {
        let (a, b) = (noise(1, 8), noise(2, 8));
        let (each, agg) = quality_report(&[(&a, &a, "same")]).unwrap();
        assert_eq!(each, agg);
        assert_eq!((agg[0].psnr, agg[0].ssim, agg[0].mse), (PSNR_CAP, 1.0, 0.0));
        let (_, agg) = quality_report(&[(&a, &b, "t"), (&b, &a, "t"), (&a, &a, "u")]).unwrap();
        assert_eq!(agg.iter().map(|r| r.pair_tag.as_str()).collect::<Vec<_>>(), ["t", "u"]);
        assert!(quality_report(&[]).is_err());
    }

    #[test]
    fn identical_images_always_succeed() {
        let model = Embedder::new(0, 16).unwrap();
        let src: Vec<Image> = (0..5).map(|i| noise(i, 16)).collect();
        let sets: Vec<(ImageRole, &[Image])> = ImageRole::ALL.iter().map(|r| (*r, src.as_slice())).collect();
        let rep = protection_report(&sets, &src, &model, "m0", 0.9, "h").unwrap();
        assert_eq!(rep.rows.len(), 4);
        for role in ImageRole::ALL {
            assert_eq!(rep.asr(role), Some(100.0));
        }
        let short: Vec<(ImageRole, &[Image])> = vec![(ImageRole::Cover, &src[..3])];
        assert!(protection_report(&short, &src, &model, "m0", 0.9, "h").is_err());
    }

    #[test]
    fn noise_images_sit_near_the_false_accept_rate() {
        // impostor scores of random images define tau; fresh random images
        // then pass at roughly the calibrated rate
        let model = Embedder::new(1, 16).unwrap();
        let pool: Vec<_> = (0..60).map(|i| model.embed(&noise(100 + i, 16)).unwrap()).collect();
        let mut imp = Vec::new();
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                imp.push(cos_sim(&pool[i], &pool[j]));
            }
        }
        let tau = threshold_from_impostors(&imp, 0.01).unwrap();
        let src: Vec<Image> = (0..200).map(|i| noise(1000 + i, 16)).collect();
        let fake: Vec<Image> = (0..200).map(|i| noise(5000 + i, 16)).collect();
        let rep = protection_report(&[(ImageRole::Hidden, &fake)], &src, &model, "m1", tau, "h").unwrap();
        assert!(rep.asr(ImageRole::Hidden).unwrap() <= 5.0);
    }

    #[test]
    fn csv_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let q = QualityReport { pair_tag: "t".into(), psnr: 30.0, ssim: 0.9, mse: 0.001, rmse: 0.001f64.sqrt() };
        write_quality_csv(&dir.path().join("q.csv"), &[q]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
        assert!(text.starts_with("pair_tag,psnr,ssim,mse,rmse\nt,30,"));
        let p = ProtectionReport {
            model_id: "m".into(),
            tau: 0.5,
            n_samples: 2,
            config_hash: "h".into(),
            rows: vec![RoleAsr { role: ImageRole::RecoveryUnauthorized, asr: 50.0 }],
        };
        write_protection_csv(&dir.path().join("p.csv"), &[p]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(text.contains("m,Recovery-Unauthorized,50,0.5,2,h"));
    }
}
