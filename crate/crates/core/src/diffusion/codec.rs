use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LatentCode;
use crate::data::Image;
use crate::error::{Result, SiderError};
use crate::nn::{Adam, Bound, Checkpoint, Conv2d, Graph, ParamStore, Tensor, Var};

pub const AUTOENCODER_KIND: &str = "autoencoder";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub width: usize,
    pub latent_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { width: 8, latent_channels: 4 }
    }
}

/// Convolutional autoencoder with a 4× spatial reduction.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    params: ParamStore,
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
    /// Multiplies raw encoder outputs so latents have roughly unit variance.
    latent_scale: f64,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (w, lc) = (cfg.width, cfg.latent_channels);
        let enc = [
            Conv2d::new(&mut p, "enc0", 3, w, 3, 1, 1.0, &mut rng),
            Conv2d::new(&mut p, "enc1", w, 2 * w, 3, 2, 1.0, &mut rng),
            Conv2d::new(&mut p, "enc2", 2 * w, 2 * w, 3, 2, 1.0, &mut rng),
            Conv2d::new(&mut p, "enc3", 2 * w, lc, 3, 1, 1.0, &mut rng),
        ];
        let dec = [
            Conv2d::new(&mut p, "dec0", lc, 2 * w, 3, 1, 1.0, &mut rng),
            Conv2d::new(&mut p, "dec1", 2 * w, 2 * w, 3, 1, 1.0, &mut rng),
            Conv2d::new(&mut p, "dec2", 2 * w, w, 3, 1, 1.0, &mut rng),
            Conv2d::new(&mut p, "dec3", w, 3, 3, 1, 1.0, &mut rng),
        ];
        Self { cfg, params: p, enc, dec, latent_scale: 1.0 }
    }

    pub fn config(&self) -> AutoencoderConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    fn encode_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.enc[0].forward(p, x).silu();
        let h = self.enc[1].forward(p, h).silu();
        let h = self.enc[2].forward(p, h).silu();
        self.enc[3].forward(p, h).scale(self.latent_scale)
    }

    fn decode_var<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        let h = self.dec[0].forward(p, z.scale(1.0 / self.latent_scale)).silu().upsample2x();
        let h = self.dec[1].forward(p, h).silu().upsample2x();
        let h = self.dec[2].forward(p, h).silu();
        self.dec[3].forward(p, h).sigmoid()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "latent_scale": self.latent_scale });
        Checkpoint::new(AUTOENCODER_KIND, meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, AUTOENCODER_KIND)?;
        let cfg: AutoencoderConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let mut ae = Self::new(cfg, 0);
        ckpt.restore_into(&mut ae.params)?;
        ae.latent_scale =
            ckpt.meta["latent_scale"].as_f64().ok_or_else(|| SiderError::Checkpoint("missing latent_scale".into()))?;
        Ok(ae)
    }
}

pub(crate) fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(SiderError::Checkpoint(format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
    }
    Ok(())
}

/// Maps images to diffusion latents and back.
#[derive(Clone, Debug)]
pub enum Codec {
    /// The latent is the image itself.
    Identity,
    Learned(Autoencoder),
}

impl Codec {
    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Self::Identity => None,
            Self::Learned(ae) => Some(ae.params()),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.params().map_or_else(Bound::empty, |p| p.bind(g, trainable))
    }

    /// `[C, h, w]` latent for a square image of side `resolution`.
    pub fn latent_shape(&self, resolution: usize) -> [usize; 3] {
        match self {
            Self::Identity => [3, resolution, resolution],
            Self::Learned(ae) => [ae.cfg.latent_channels, resolution / 4, resolution / 4],
        }
    }

    /// `[N,3,H,W]` images to `[N,C,h,w]` latents.
    pub fn encode_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        match self {
            Self::Identity => x,
            Self::Learned(ae) => ae.encode_var(p, x),
        }
    }

    /// `[N,C,h,w]` latents to `[N,3,H,W]` images in `[0, 1]`.
    pub fn decode_var<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        match self {
            Self::Identity => z.clamp(0.0, 1.0),
            Self::Learned(ae) => ae.decode_var(p, z),
        }
    }

    pub fn encode(&self, x: &Image) -> Result<LatentCode> {
        if x.width() != x.height() || !x.width().is_multiple_of(4) {
            return Err(SiderError::Shape(format!(
                "codec needs a square image with side divisible by 4, got {}×{}",
                x.width(),
                x.height()
            )));
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        let [c, h, w] = self.latent_shape(x.width());
        let z = self.encode_var(&p, g.constant(x.to_tensor().reshape(vec![1, 3, x.height(), x.width()])));
        Ok(LatentCode::new(z.to_tensor().reshape(vec![c, h, w]), 0))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Image> {
        let s = z.values.shape();
        let expected_c = match self {
            Self::Identity => 3,
            Self::Learned(ae) => ae.cfg.latent_channels,
        };
        if s.len() != 3 || s[0] != expected_c {
            return Err(SiderError::Shape(format!("latent {s:?} does not fit this codec")));
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        let x = self.decode_var(&p, g.constant(z.values.clone().reshape(vec![1, s[0], s[1], s[2]])));
        Image::from_tensor(&x.to_tensor())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self { epochs: 30, batch: 8, lr: 3e-3, seed: 0 }
    }
}

fn batch_tensor(images: &[&Image], idx: &[usize]) -> Tensor {
    let ts: Vec<Tensor> = idx.iter().map(|&i| images[i].to_tensor()).collect();
    Tensor::stack(&ts.iter().collect::<Vec<_>>())
}

/// Trains on pixel MSE, then sets the latent scale from the training latents.
/// Returns the model and the per-epoch mean loss.
pub fn train_autoencoder(
    images: &[&Image],
    cfg: AutoencoderConfig,
    train: &AutoencoderTraining,
) -> Result<(Autoencoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(SiderError::NoData("autoencoder training set is empty".into()));
    }
    let mut ae = Autoencoder::new(cfg, train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xae);
    let mut opt = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    let total_steps = train.epochs * images.len().div_ceil(train.batch.max(1));
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(train.batch.max(1)) {
            // cosine decay keeps the last epochs from bouncing
            opt.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            let g = Graph::new();
            let p = ae.params.bind(&g, true);
            let x = g.constant(batch_tensor(images, chunk));
            let y = ae.decode_var(&p, ae.encode_var(&p, x));
            let loss = y.sub(x).square().mean();
            let l = loss.item();
            if !l.is_finite() {
                return Err(SiderError::TrainingDiverged { what: "autoencoder".into(), step, loss: l });
            }
            let gr = g.backward(loss);
            opt.step(&mut ae.params, &p.grads(&gr));
            sum += l * chunk.len() as f64;
            n += chunk.len();
            step += 1;
        }
        history.push(sum / n as f64);
    }
    let mut acc = (0.0, 0.0, 0usize);
    for chunk in order.chunks(32) {
        let g = Graph::new();
        let p = ae.params.bind(&g, false);
        let z = ae.encode_var(&p, g.constant(batch_tensor(images, chunk))).to_tensor();
        for v in z.data() {
            acc.0 += v;
            acc.1 += v * v;
            acc.2 += 1;
        }
    }
    let mean = acc.0 / acc.2 as f64;
    let std = (acc.1 / acc.2 as f64 - mean * mean).max(1e-12).sqrt();
    ae.latent_scale = 1.0 / std;
    Ok((ae, history))
}
