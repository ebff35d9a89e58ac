use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::expect_kind;
use super::schedule::NoiseSchedule;
use crate::error::{Result, SiderError};
use crate::nn::{Adam, Bound, Checkpoint, Conv2d, Graph, Linear, ParamStore, Tensor, Var};

pub const DENOISER_KIND: &str = "denoiser";
const TIME_FEATURES: usize = 16;

/// Anything that predicts the injected noise ε from `(z_t, t, c)`.
pub trait NoisePredictor {
    /// Parameters placed on `g` as constants.
    fn bind<'g>(&self, g: &'g Graph) -> Bound<'g>;

    /// `z: [N,C,h,w]`, `c: [N,d]`; returns ε̂ shaped like `z`.
    fn predict<'g>(&self, p: &Bound<'g>, z: Var<'g>, t: usize, c: Var<'g>) -> Var<'g>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 4, width: 24, blocks: 1, cond_dim: 12 }
    }
}

/// Small residual conv net with per-channel time and condition shifts.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    blocks: Vec<(Conv2d, Conv2d)>,
    conv_out: Conv2d,
}

/// Sinusoidal features of the timestep, one row per entry of `ts`.
fn time_features(ts: &[usize]) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(ts.len() * TIME_FEATURES);
    for &t in ts {
        for k in 0..half {
            let f = (-(100f64.ln()) * k as f64 / half as f64).exp();
            out.push((t as f64 * f).sin());
        }
        for k in 0..half {
            let f = (-(100f64.ln()) * k as f64 / half as f64).exp();
            out.push((t as f64 * f).cos());
        }
    }
    Tensor::new(vec![ts.len(), TIME_FEATURES], out)
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = cfg.width;
        let conv_in = Conv2d::new(&mut p, "conv_in", cfg.latent_channels, w, 3, 1, 1.0, &mut rng);
        let time1 = Linear::new(&mut p, "time1", TIME_FEATURES, w, true, 1.0, &mut rng);
        let time2 = Linear::new(&mut p, "time2", w, w, true, 1.0, &mut rng);
        // zero init: conditional and unconditional outputs start identical
        let cond = Linear::new(&mut p, "cond", cfg.cond_dim, w, false, 0.0, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                (
                    Conv2d::new(&mut p, &format!("block{i}.a"), w, w, 3, 1, 1.0, &mut rng),
                    Conv2d::new(&mut p, &format!("block{i}.b"), w, w, 3, 1, 0.5, &mut rng),
                )
            })
            .collect();
        let conv_out = Conv2d::new(&mut p, "conv_out", w, cfg.latent_channels, 3, 1, 0.5, &mut rng);
        Self { cfg, params: p, conv_in, time1, time2, cond, blocks, conv_out }
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Forward pass with one timestep per batch row.
    pub fn eps_var<'g>(&self, p: &Bound<'g>, z: Var<'g>, ts: &[usize], c: Var<'g>) -> Var<'g> {
        let g = z.graph();
        let temb = self.time2.forward(p, self.time1.forward(p, g.constant(time_features(ts))).silu());
        let emb = temb.add(self.cond.forward(p, c));
        let mut h = self.conv_in.forward(p, z).add_channels(emb);
        for (a, b) in &self.blocks {
            let r = b.forward(p, a.forward(p, h.silu()).add_channels(emb).silu());
            h = h.add(r);
        }
        self.conv_out.forward(p, h.silu())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(DENOISER_KIND, serde_json::json!({ "config": self.cfg }), self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, DENOISER_KIND)?;
        let cfg: DenoiserConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let mut d = Self::new(cfg, 0);
        ckpt.restore_into(&mut d.params)?;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.params.bind(g, false)
    }

    fn predict<'g>(&self, p: &Bound<'g>, z: Var<'g>, t: usize, c: Var<'g>) -> Var<'g> {
        let n = z.shape()[0];
        self.eps_var(p, z, &vec![t; n], c)
    }
}

/// Returns the exact noise that maps a known `z0` to the given `z_t`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub z0: Tensor,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn bind<'g>(&self, _: &'g Graph) -> Bound<'g> {
        Bound::empty()
    }

    fn predict<'g>(&self, _: &Bound<'g>, z: Var<'g>, t: usize, _: Var<'g>) -> Var<'g> {
        let ab = self.schedule.alpha_bar(t);
        let n = z.shape()[0];
        let rows: Vec<&Tensor> = vec![&self.z0; n];
        let z0 = z.graph().constant(Tensor::stack(&rows).reshape(z.shape()));
        z.sub(z0.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition by the null embedding.
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self { epochs: 40, batch: 16, lr: 2e-3, p_drop: 0.2, seed: 0 }
    }
}

/// Training pairs: clean latents `[C,h,w]` and their condition vectors.
pub struct DenoiserData<'a> {
    pub latents: &'a [Tensor],
    pub conditions: &'a [Vec<f64>],
}

fn noisy_batch<R: Rng>(
    data: &DenoiserData<'_>,
    idx: &[usize],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> (Tensor, Tensor, Vec<usize>, Tensor) {
    let shape = data.latents[0].shape().to_vec();
    let d = data.conditions[0].len();
    let mut zt = Vec::new();
    let mut eps = Vec::new();
    let mut conds = Vec::new();
    let mut ts = Vec::new();
    for &i in idx {
        let t = rng.random_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t);
        let e = Tensor::randn(shape.clone(), rng);
        zt.extend(data.latents[i].data().iter().zip(e.data()).map(|(z, n)| ab.sqrt() * z + (1.0 - ab).sqrt() * n));
        eps.extend_from_slice(e.data());
        if rng.random::<f64>() < p_drop {
            conds.extend(std::iter::repeat_n(0.0, d));
        } else {
            conds.extend_from_slice(&data.conditions[i]);
        }
        ts.push(t);
    }
    let mut bshape = vec![idx.len()];
    bshape.extend_from_slice(&shape);
    (Tensor::new(bshape.clone(), zt), Tensor::new(bshape, eps), ts, Tensor::new(vec![idx.len(), d], conds))
}

/// ε-prediction MSE; returns the model and per-epoch mean loss.
pub fn train_denoiser(
    data: &DenoiserData<'_>,
    schedule: &NoiseSchedule,
    cfg: DenoiserConfig,
    train: &DenoiserTraining,
) -> Result<(Denoiser, Vec<f64>)> {
    if data.latents.is_empty() {
        return Err(SiderError::NoData("denoiser training set is empty".into()));
    }
    if data.latents.len() != data.conditions.len() {
        return Err(SiderError::Shape("one condition per latent".into()));
    }
    let mut model = Denoiser::new(cfg, train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xd1f);
    let mut opt = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..data.latents.len()).collect();
    let batch = train.batch.max(1);
    let total = train.epochs * order.len().div_ceil(batch);
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(batch) {
            opt.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let (zt, eps, ts, conds) = noisy_batch(data, chunk, schedule, train.p_drop, &mut rng);
            let g = Graph::new();
            let p = model.params.bind(&g, true);
            let pred = model.eps_var(&p, g.constant(zt), &ts, g.constant(conds));
            let loss = pred.sub(g.constant(eps)).square().mean();
            let l = loss.item();
            if !l.is_finite() {
                return Err(SiderError::TrainingDiverged { what: "denoiser".into(), step, loss: l });
            }
            let gr = g.backward(loss);
            opt.step(&mut model.params, &p.grads(&gr));
            sum += l * chunk.len() as f64;
            n += chunk.len();
            step += 1;
        }
        history.push(sum / n as f64);
    }
    Ok((model, history))
}

/// Mean ε-MSE over `draws` fixed noise draws per latent, conditions kept.
pub fn eps_mse(model: &Denoiser, data: &DenoiserData<'_>, schedule: &NoiseSchedule, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..data.latents.len()).collect();
    let mut total = 0.0;
    for _ in 0..draws {
        for chunk in idx.chunks(32) {
            let (zt, eps, ts, conds) = noisy_batch(data, chunk, schedule, 0.0, &mut rng);
            let g = Graph::new();
            let p = model.params.bind(&g, false);
            let pred = model.eps_var(&p, g.constant(zt), &ts, g.constant(conds));
            total += pred.sub(g.constant(eps)).square().sum().item();
        }
    }
    total / (draws * data.latents.len() * data.latents[0].len()) as f64
}

/// Mean |ε_c − ε_∅| over the data at random timesteps.
pub fn mean_condition_gap(model: &Denoiser, data: &DenoiserData<'_>, schedule: &NoiseSchedule, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..data.latents.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(32) {
        let (zt, _, ts, conds) = noisy_batch(data, chunk, schedule, 0.0, &mut rng);
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let z = g.constant(zt);
        let null = g.constant(Tensor::zeros(conds.shape().to_vec()));
        let ec = model.eps_var(&p, z, &ts, g.constant(conds));
        let eu = model.eps_var(&p, z, &ts, null);
        total += ec.to_tensor().zip_map(&eu.to_tensor(), |a, b| (a - b).abs()).sum();
        count += ec.value().len();
    }
    total / count as f64
}
