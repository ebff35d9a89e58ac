use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, ImageSample};
use crate::diffusion::codec::expect_kind;
use crate::error::{Result, SiderError};
use crate::nn::{Adam, Bound, Checkpoint, Conv2d, Graph, Linear, ParamStore, Tensor, Var};

pub const EMBEDDER_KIND: &str = "embedder";
pub const EMBED_DIM: usize = 128;

/// Stage widths and whether a stride-1 conv follows the last stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedderArch {
    pub widths: [usize; 4],
    pub extra: bool,
}

/// Indexed by `arch_seed % ARCH_TABLE.len()`. Every entry has a distinct parameter count.
pub const ARCH_TABLE: [EmbedderArch; 6] = [
    EmbedderArch { widths: [8, 16, 24, 32], extra: false },
    EmbedderArch { widths: [12, 16, 32, 32], extra: true },
    EmbedderArch { widths: [8, 12, 24, 48], extra: false },
    EmbedderArch { widths: [16, 24, 32, 32], extra: false },
    EmbedderArch { widths: [8, 16, 32, 64], extra: true },
    EmbedderArch { widths: [10, 20, 28, 40], extra: false },
];

/// Strided conv stack, flattened 4×4 map, linear projection, L2 normalization.
#[derive(Clone, Debug)]
pub struct Embedder {
    arch_seed: u64,
    resolution: usize,
    params: ParamStore,
    stages: Vec<Conv2d>,
    extra: Option<Conv2d>,
    head: Linear,
    flat: usize,
}

/// Unit-norm identity feature.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    values: Vec<f64>,
}

impl IdentityEmbedding {
    /// Normalizes `values`; errors on a zero vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SiderError::Argument("embedding must have a finite nonzero norm".into()));
        }
        Ok(Self { values: values.into_iter().map(|v| v / n).collect() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.values.len()], self.values.clone())
    }
}

/// Dot product of two unit embeddings.
pub fn cos_sim(a: &IdentityEmbedding, b: &IdentityEmbedding) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

fn stage_count(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(SiderError::Argument(format!("embedder resolution {resolution} must be a power of two ≥ 8")));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

impl Embedder {
    pub fn new(arch_seed: u64, resolution: usize) -> Result<Self> {
        let arch = ARCH_TABLE[(arch_seed % ARCH_TABLE.len() as u64) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(arch_seed);
        let mut p = ParamStore::new();
        let mut c_in = 3;
        let mut stages = Vec::new();
        for i in 0..stage_count(resolution)? {
            let w = arch.widths[i.min(3)];
            stages.push(Conv2d::new(&mut p, &format!("stage{i}"), c_in, w, 3, 2, 1.0, &mut rng));
            c_in = w;
        }
        let extra = arch.extra.then(|| Conv2d::new(&mut p, "extra", c_in, c_in, 3, 1, 1.0, &mut rng));
        let flat = c_in * 16;
        let head = Linear::new(&mut p, "head", flat, EMBED_DIM, true, 1.0, &mut rng);
        Ok(Self { arch_seed, resolution, params: p, stages, extra, head, flat })
    }

    pub fn arch_seed(&self) -> u64 {
        self.arch_seed
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.params.bind(g, false)
    }

    /// `[N,3,H,W]` in `[0,1]` to unit rows `[N, 128]`.
    pub fn embed_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let n = x.shape()[0];
        // center pixel values
        let mut h = x.add_scalar(-0.5);
        for s in &self.stages {
            h = s.forward(p, h).silu();
        }
        if let Some(e) = &self.extra {
            h = h.add(e.forward(p, h).silu());
        }
        self.head.forward(p, h.reshape(vec![n, self.flat])).l2_normalize_rows()
    }

    pub fn embed(&self, x: &Image) -> Result<IdentityEmbedding> {
        self.check_image(x)?;
        let g = Graph::new();
        let p = self.bind(&g);
        let e = self.embed_var(&p, g.constant(x.to_tensor().reshape(vec![1, 3, x.height(), x.width()])));
        Ok(IdentityEmbedding { values: e.to_tensor().into_data() })
    }

    /// Embeds many images in chunks.
    pub fn embed_all(&self, images: &[&Image]) -> Result<Vec<IdentityEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            for x in chunk {
                self.check_image(x)?;
            }
            let g = Graph::new();
            let p = self.bind(&g);
            let ts: Vec<Tensor> = chunk.iter().map(|x| x.to_tensor()).collect();
            let e = self.embed_var(&p, g.constant(Tensor::stack(&ts.iter().collect::<Vec<_>>()))).to_tensor();
            out.extend(e.data().chunks(EMBED_DIM).map(|r| IdentityEmbedding { values: r.to_vec() }));
        }
        Ok(out)
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.width() != self.resolution || x.height() != self.resolution {
            return Err(SiderError::Shape(format!(
                "embedder expects {0}×{0}, got {1}×{2}",
                self.resolution,
                x.width(),
                x.height()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta =
            serde_json::json!({ "arch_seed": self.arch_seed, "resolution": self.resolution, "embed_dim": EMBED_DIM });
        Checkpoint::new(EMBEDDER_KIND, meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, EMBEDDER_KIND)?;
        let field = |k: &str| ckpt.meta[k].as_u64().ok_or_else(|| SiderError::Checkpoint(format!("missing {k}")));
        let mut e = Self::new(field("arch_seed")?, field("resolution")? as usize)?;
        ckpt.restore_into(&mut e.params)?;
        Ok(e)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EmbedderTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Logit scale of the additive-margin softmax.
    pub scale: f64,
    pub margin: f64,
    /// Random blur, noise and colour jitter on half of each batch.
    #[serde(default)]
    pub augment: bool,
}

impl Default for EmbedderTraining {
    fn default() -> Self {
        Self { epochs: 30, batch: 16, lr: 3e-3, scale: 16.0, margin: 0.25, augment: true }
    }
}

/// Degrades a `[3,H,W]` image the way a weak generator does: box blur
/// blended in at a random weight, then per-channel gain/offset and noise.
fn augment<R: Rng>(x: &Tensor, rng: &mut R) -> Tensor {
    let (h, w) = (x.dim(1), x.dim(2));
    let d = x.data();
    let mut out = d.to_vec();
    let blend = rng.random_range(0.0..1.0);
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xc) = (y as i64 + dy, xx as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xc >= 0 && xc < w as i64 {
                            acc += d[c * h * w + yy as usize * w + xc as usize];
                            n += 1.0;
                        }
                    }
                }
                let i = c * h * w + y * w + xx;
                out[i] = (1.0 - blend) * d[i] + blend * acc / n;
            }
        }
    }
    let sigma = rng.random_range(0.0..0.04);
    for c in 0..3 {
        let gain = rng.random_range(0.9..1.1);
        let offset = rng.random_range(-0.05..0.05);
        for v in &mut out[c * h * w..(c + 1) * h * w] {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *v = (*v * gain + offset + sigma * n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Additive-margin softmax over the identities present in `samples`.
/// Returns the embedder and the per-epoch mean loss.
pub fn train_embedder(
    samples: &[&ImageSample],
    arch_seed: u64,
    train: &EmbedderTraining,
) -> Result<(Embedder, Vec<f64>)> {
    let first = samples.first().ok_or_else(|| SiderError::NoData("embedder training set is empty".into()))?;
    let mut model = Embedder::new(arch_seed, first.pixels.width())?;
    let classes: BTreeMap<usize, usize> =
        samples.iter().map(|s| s.identity_id).collect::<std::collections::BTreeSet<_>>().into_iter().zip(0..).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(arch_seed.wrapping_mul(0x9e37_79b9) ^ 0xe1);
    let mut head = ParamStore::new();
    let centers = head.add("centers", Tensor::randn(vec![classes.len(), EMBED_DIM], &mut rng));
    let mut opt = Adam::new(train.lr);
    let mut head_opt = Adam::new(train.lr);
    let images: Vec<Tensor> = samples.iter().map(|s| s.pixels.to_tensor()).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = train.batch.max(2);
    let total = train.epochs * order.len().div_ceil(batch);
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(batch) {
            let lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            opt.lr = lr;
            head_opt.lr = lr;
            let labels: Vec<usize> = chunk.iter().map(|&i| classes[&samples[i].identity_id]).collect();
            let views: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if train.augment && rng.random_bool(0.5) {
                        augment(&images[i], &mut rng)
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let x = Tensor::stack(&views.iter().collect::<Vec<_>>());
            let g = Graph::new();
            let p = model.params.bind(&g, true);
            let hp = head.bind(&g, true);
            let emb = model.embed_var(&p, g.constant(x));
            let cos = emb.linear(hp.get(centers).l2_normalize_rows(), None);
            let mut margin = Tensor::zeros(vec![chunk.len(), classes.len()]);
            for (r, &l) in labels.iter().enumerate() {
                margin.data_mut()[r * classes.len() + l] = train.margin;
            }
            let loss = cos.sub(g.constant(margin)).scale(train.scale).cross_entropy(&labels);
            let l = loss.item();
            if !l.is_finite() {
                return Err(SiderError::TrainingDiverged { what: format!("embedder {arch_seed}"), step, loss: l });
            }
            let gr = g.backward(loss);
            opt.step(&mut model.params, &p.grads(&gr));
            head_opt.step(&mut head, &hp.grads(&gr));
            sum += l * chunk.len() as f64;
            n += chunk.len();
            step += 1;
        }
        history.push(sum / n as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_faces;

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let m = synth_faces(2, 2, 0).unwrap();
        let e = Embedder::new(3, 64).unwrap();
        let a = e.embed(&m.samples()[0].pixels).unwrap();
        let norm = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a, e.embed(&m.samples()[0].pixels).unwrap());
        assert_eq!(a.values().len(), EMBED_DIM);
    }

    #[test]
    fn batch_embedding_matches_single() {
        let m = synth_faces(2, 2, 0).unwrap();
        let e = Embedder::new(1, 64).unwrap();
        let imgs: Vec<&Image> = m.samples().iter().map(|s| &s.pixels).collect();
        let all = e.embed_all(&imgs).unwrap();
        for (img, b) in imgs.iter().zip(&all) {
            assert!(cos_sim(&e.embed(img).unwrap(), b) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn arch_table_gives_distinct_sizes() {
        let counts: Vec<usize> =
            (0..ARCH_TABLE.len() as u64).map(|s| Embedder::new(s, 64).unwrap().params().count()).collect();
        for i in 0..counts.len() {
            for j in i + 1..counts.len() {
                assert_ne!(counts[i], counts[j], "{counts:?}");
            }
        }
    }

    #[test]
    fn cos_sim_cases() {
        let e = IdentityEmbedding::new(vec![0.3, -0.4, 1.2]).unwrap();
        let neg = IdentityEmbedding::new(e.values().iter().map(|v| -v).collect()).unwrap();
        assert!((cos_sim(&e, &e) - 1.0).abs() < 1e-12);
        assert!((cos_sim(&e, &neg) + 1.0).abs() < 1e-12);
        let x = IdentityEmbedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        let y = IdentityEmbedding::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cos_sim(&x, &y), 0.0);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let m = synth_faces(2, 1, 0).unwrap();
        assert!(Embedder::new(0, 32).unwrap().embed(&m.samples()[0].pixels).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let e = Embedder::new(4, 32).unwrap();
        let back = Embedder::from_checkpoint(&Checkpoint::from_bytes(&e.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params().count(), e.params().count());
        assert_eq!(back.arch_seed(), 4);
    }
}
