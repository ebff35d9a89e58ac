use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inn::{Crm, PLANE_CHANNELS};
use super::key::ProtectionKey;
use super::wavelet::dwt;
use crate::data::{quantize_u8, Image};
use crate::error::{Result, SiderError};
use crate::nn::{Adam, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CrmTriple {
    pub cover: Image,
    pub decoy: Image,
    pub secret: Image,
}

/// Weights on protected-vs-cover, decoy recovery, secret recovery and the
/// low-frequency band of the protected image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cover: f64,
    pub decoy: f64,
    pub secret: f64,
    pub low_freq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cover: 1.0, decoy: 2.0, secret: 4.0, low_freq: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrmTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Pulls wrong-key deep inversions toward the decoy.
    pub wrong_key: f64,
    pub seed: u64,
}

impl Default for CrmTraining {
    fn default() -> Self {
        Self { epochs: 20, batch: 8, lr: 1e-3, weights: LossWeights::default(), wrong_key: 1.0, seed: 0 }
    }
}

fn stack_planes(images: &[&Image]) -> Result<Tensor> {
    let planes: Vec<Tensor> = images.iter().map(|x| dwt(x).map(|p| p.stacked())).collect::<Result<_>>()?;
    Ok(Tensor::stack(&planes.iter().collect::<Vec<_>>()))
}

fn mse<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    a.sub(b).square().mean()
}

/// Per-batch loss terms, before weighting.
struct Terms<'g> {
    cover: Var<'g>,
    decoy: Var<'g>,
    secret: Var<'g>,
    low_freq: Var<'g>,
    wrong: Var<'g>,
}

fn batch_terms<'g>(
    crm: &Crm,
    g: &'g Graph,
    p: &crate::nn::Bound<'g>,
    batch: &[&CrmTriple],
    rng: &mut ChaCha8Rng,
) -> Result<Terms<'g>> {
    let a = g.constant(stack_planes(&batch.iter().map(|t| &t.cover).collect::<Vec<_>>())?);
    let d = g.constant(stack_planes(&batch.iter().map(|t| &t.decoy).collect::<Vec<_>>())?);
    let s = g.constant(stack_planes(&batch.iter().map(|t| &t.secret).collect::<Vec<_>>())?);
    let shape = a.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let keys: Vec<ProtectionKey> = (0..n).map(|_| ProtectionKey::generate_with(rng)).collect();
    let wrong: Vec<ProtectionKey> = (0..n).map(|_| ProtectionKey::generate_with(rng)).collect();
    let k = crm.key_vars(g, &keys, h, w);
    let kw = crm.key_vars(g, &wrong, h, w);

    let (inter, _) = crm.deep_embed_var(p, a, s, &k);
    let (prot, _) = crm.shallow_embed_var(p, inter, d);
    let x_hat = prot.idwt().straight_through(|v| quantize_u8(v) as f64 / 255.0);
    let pq = x_hat.dwt();

    let z1 = g.constant(Tensor::randn(vec![n, PLANE_CHANNELS, h, w], rng));
    let z2 = g.constant(Tensor::randn(vec![n, PLANE_CHANNELS, h, w], rng));
    let (inter2, decoy2) = crm.shallow_invert_var(p, pq, z1);
    let (_, secret2) = crm.deep_invert_var(p, inter2, z2, &k);
    let (_, secret_wrong) = crm.deep_invert_var(p, inter2, z2, &kw);
    Ok(Terms {
        cover: mse(pq, a),
        decoy: mse(decoy2, d),
        secret: mse(secret2, s),
        low_freq: mse(pq.narrow(1, 0, 3), a.narrow(1, 0, 3)),
        wrong: mse(secret_wrong, d),
    })
}

/// Trains both stacks end to end with quantization in the loop and Gaussian
/// stand-ins for the discarded branches. Returns the per-epoch mean loss.
pub fn train_crm(mut crm: Crm, triples: &[CrmTriple], train: &CrmTraining) -> Result<(Crm, Vec<f64>)> {
    if triples.is_empty() {
        return Err(SiderError::NoData("no training triples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let bs = train.batch.max(1);
    let total = train.epochs * triples.len().div_ceil(bs);
    let lw = train.weights;
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(bs) {
            opt.lr = train.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let batch: Vec<&CrmTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let g = Graph::new();
            let p = crm.bind(&g, true);
            let t = batch_terms(&crm, &g, &p, &batch, &mut rng)?;
            let loss = t
                .cover
                .scale(lw.cover)
                .add(t.decoy.scale(lw.decoy))
                .add(t.secret.scale(lw.secret))
                .add(t.low_freq.scale(lw.low_freq))
                .add(t.wrong.scale(train.wrong_key));
            let l = loss.item();
            if !l.is_finite() {
                return Err(SiderError::TrainingDiverged { what: "crm".into(), step, loss: l });
            }
            let grads = p.grads(&g.backward(loss));
            opt.step(crm.params_mut(), &grads);
            sum += l * chunk.len() as f64;
            count += chunk.len();
            step += 1;
        }
        log::debug!("crm epoch {}: loss {:.5}", history.len(), sum / count as f64);
        history.push(sum / count as f64);
    }
    if train.epochs > 0 {
        crm.mark_trained();
    }
    Ok((crm, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crm::CrmConfig;
    use crate::data::{synth_faces_with, SynthOptions};

    fn triples(n: usize, seed: u64) -> Vec<CrmTriple> {
        let opts = SynthOptions { resolution: 16, ..SynthOptions::default() };
        let m = synth_faces_with(3 * n, 1, seed, &opts).unwrap();
        m.samples()
            .chunks(3)
            .map(|c| CrmTriple { cover: c[0].pixels.clone(), decoy: c[1].pixels.clone(), secret: c[2].pixels.clone() })
            .collect()
    }

    fn small() -> Crm {
        Crm::new(CrmConfig { deep_blocks: 2, shallow_blocks: 2, width: 8, ..CrmConfig::default() }, 1)
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let crm = small();
        let (out, hist) =
            train_crm(crm.clone(), &triples(2, 1), &CrmTraining { epochs: 0, ..CrmTraining::default() }).unwrap();
        assert!(hist.is_empty());
        assert!(!out.is_trained());
        for ((_, a), (_, b)) in out.params().iter().zip(crm.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_halves() {
        let data = triples(8, 2);
        let cfg = CrmTraining { epochs: 25, batch: 4, lr: 3e-3, ..CrmTraining::default() };
        let (crm, hist) = train_crm(small(), &data, &cfg).unwrap();
        assert!(crm.is_trained());
        assert!(hist.last().unwrap() <= &(0.5 * hist[0]), "{hist:?}");
    }
}
