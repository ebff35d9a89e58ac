use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::synth::{random_identity, SyntheticFaceSpec};
use crate::error::{Result, SiderError};

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    Synthetic,
    File(PathBuf),
}

impl std::fmt::Display for SampleSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Image,
    pub identity_id: usize,
    pub source: SampleSource,
    /// Per-identity attribute vector, used as the diffusion condition when present.
    pub attributes: Option<Vec<f64>>,
}

/// Fractions of identities held out for validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { val: 0.2, test: 0.2 }
    }
}

impl SplitPlan {
    /// Shuffles `ids` with `seed` and cuts it into train / val / test.
    /// The train split always keeps at least one identity.
    pub fn assign(&self, ids: &BTreeSet<usize>, seed: u64) -> Result<BTreeMap<usize, Split>> {
        if !(self.val >= 0.0 && self.test >= 0.0 && self.val + self.test < 1.0) {
            return Err(SiderError::Argument(format!("bad split fractions {self:?}")));
        }
        let mut order: Vec<usize> = ids.iter().copied().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len();
        let n_test = ((self.test * n as f64).round() as usize).min(n.saturating_sub(1));
        let n_val = ((self.val * n as f64).round() as usize).min(n.saturating_sub(1 + n_test));
        Ok(order
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let s = if i < n_test {
                    Split::Test
                } else if i < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                };
                (id, s)
            })
            .collect())
    }
}

/// Labeled images plus an identity-disjoint split. Immutable once built.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    samples: Vec<ImageSample>,
    splits: BTreeMap<usize, Split>,
    resolution: usize,
    skipped: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    identity_id: usize,
    source: String,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    attributes: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    resolution: usize,
    identity_count: usize,
    skipped: usize,
    samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<ImageSample>, resolution: usize, plan: SplitPlan, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(SiderError::NoData("manifest has no samples".into()));
        }
        for s in &samples {
            if s.pixels.width() != resolution || s.pixels.height() != resolution {
                return Err(SiderError::Shape(format!(
                    "sample {}×{} does not match resolution {resolution}",
                    s.pixels.width(),
                    s.pixels.height()
                )));
            }
        }
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity_id).collect();
        if ids.len() < 2 {
            return Err(SiderError::TooFewIdentities(ids.len()));
        }
        let splits = plan.assign(&ids, seed)?;
        Ok(Self { samples, splits, resolution, skipped: 0 })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn identity_count(&self) -> usize {
        self.splits.len()
    }

    /// Files that could not be decoded during loading.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn split_of(&self, identity_id: usize) -> Option<Split> {
        self.splits.get(&identity_id).copied()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<usize> {
        self.splits.iter().filter(|(_, s)| **s == split).map(|(id, _)| *id).collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| self.splits[&s.identity_id] == split).collect()
    }

    /// Same samples, split again with a different plan or seed.
    pub fn resplit(&self, plan: SplitPlan, seed: u64) -> Result<Self> {
        let ids = self.splits.keys().copied().collect();
        Ok(Self { splits: plan.assign(&ids, seed)?, ..self.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = ManifestRecord {
            resolution: self.resolution,
            identity_count: self.identity_count(),
            skipped: self.skipped,
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    identity_id: s.identity_id,
                    source: s.source.to_string(),
                    split: self.splits[&s.identity_id],
                    attributes: s.attributes.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }
}

/// Options for [`synth_faces_with`].
#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub resolution: usize,
    pub pose_jitter: f64,
    pub split: SplitPlan,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, pose_jitter: 1.0, split: SplitPlan::default() }
    }
}

pub fn synth_faces(n_identities: usize, per_identity: usize, seed: u64) -> Result<DatasetManifest> {
    synth_faces_with(n_identities, per_identity, seed, &SynthOptions::default())
}

/// Renders `per_identity` poses of `n_identities` random faces.
pub fn synth_faces_with(
    n_identities: usize,
    per_identity: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    if n_identities < 2 {
        return Err(SiderError::TooFewIdentities(n_identities));
    }
    if per_identity < 1 {
        return Err(SiderError::Argument("per_identity must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identities: Vec<Vec<f64>> = (0..n_identities).map(|_| random_identity(&mut rng)).collect();
    let mut samples = Vec::with_capacity(n_identities * per_identity);
    for (id, vector) in identities.into_iter().enumerate() {
        for _ in 0..per_identity {
            let spec = SyntheticFaceSpec {
                identity_vector: vector.clone(),
                pose_jitter: opts.pose_jitter,
                seed: rng.random(),
            };
            samples.push(ImageSample {
                pixels: spec.render(opts.resolution),
                identity_id: id,
                source: SampleSource::Synthetic,
                attributes: Some(vector.clone()),
            });
        }
    }
    DatasetManifest::new(samples, opts.resolution, opts.split, seed)
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        .unwrap_or(false)
}

/// Loads `<dir>/<identity>/<image>` files. Identity directories are numbered
/// in sorted name order. Undecodable files are skipped and counted.
pub fn load_dataset(dir: &Path, resolution: usize, seed: u64) -> Result<DatasetManifest> {
    if resolution == 0 || !resolution.is_multiple_of(2) {
        return Err(SiderError::Argument(format!("resolution {resolution} must be even and positive")));
    }
    let mut id_dirs: Vec<PathBuf> =
        fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    id_dirs.sort();
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (id, sub) in id_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(sub)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        for f in files {
            match image::open(&f) {
                Ok(img) => samples.push(ImageSample {
                    pixels: Image::center_crop_resize(&img.to_rgb8(), resolution),
                    identity_id: id,
                    source: SampleSource::File(f),
                    attributes: None,
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(SiderError::NoData(format!("no readable images under {}", dir.display())));
    }
    let mut m = DatasetManifest::new(samples, resolution, SplitPlan::default(), seed)?;
    m.skipped = skipped;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(root: &Path, ids: usize, per: usize) {
        for i in 0..ids {
            let d = root.join(format!("person{i}"));
            fs::create_dir_all(&d).unwrap();
            for j in 0..per {
                let img = Image::from_fn(80, 70, |x, y| [(x + i) as f32 / 100.0, (y + j) as f32 / 100.0, 0.5]);
                img.save_png(&d.join(format!("{j}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn loads_identity_directories() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 3, 2);
        fs::write(dir.path().join("person0").join("broken.png"), b"not a png").unwrap();
        let m = load_dataset(dir.path(), 64, 1).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.identity_count(), 3);
        assert_eq!(m.skipped(), 1);
        assert!(m.samples().iter().all(|s| s.pixels.width() == 64 && s.pixels.height() == 64));
    }

    #[test]
    fn single_identity_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 1, 2);
        let err = load_dataset(dir.path(), 64, 1).unwrap_err();
        assert!(err.to_string().contains("need ≥2 identities for verification pairs"));
    }

    #[test]
    fn empty_directory_is_no_data() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 64, 1), Err(SiderError::NoData(_))));
    }

    #[test]
    fn load_split_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 6, 1);
        let a = load_dataset(dir.path(), 32, 5).unwrap();
        let b = load_dataset(dir.path(), 32, 5).unwrap();
        for id in 0..6 {
            assert_eq!(a.split_of(id), b.split_of(id));
        }
    }

    #[test]
    fn synth_counts() {
        let m = synth_faces(10, 4, 7).unwrap();
        assert_eq!(m.len(), 40);
        assert_eq!(m.identity_count(), 10);
    }

    #[test]
    fn synth_is_bit_identical() {
        let a = synth_faces(3, 2, 11).unwrap();
        let b = synth_faces(3, 2, 11).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn synth_preconditions() {
        assert!(synth_faces(1, 4, 0).is_err());
        assert!(synth_faces(4, 0, 0).is_err());
    }

    #[test]
    fn manifest_json_lists_every_sample() {
        let m = synth_faces(3, 2, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(v["samples"].as_array().unwrap().len(), 6);
        assert_eq!(v["identity_count"], 3);
    }

    proptest::proptest! {
        #[test]
        fn splits_are_identity_disjoint(n in 2usize..40, seed in 0u64..1000, val in 0.0f64..0.45, test in 0.0f64..0.45) {
            let ids: BTreeSet<usize> = (0..n).collect();
            let a = SplitPlan { val, test }.assign(&ids, seed).unwrap();
            proptest::prop_assert_eq!(a.len(), n);
            proptest::prop_assert!(a.values().any(|s| *s == Split::Train));
        }
    }
}
