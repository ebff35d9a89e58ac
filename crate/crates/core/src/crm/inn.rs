use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::key::{key_expand, key_rotation, ProtectionKey};
use super::wavelet::WaveletPlanes;
use crate::diffusion::codec::expect_kind;
use crate::error::{Result, SiderError};
use crate::nn::{Bound, Checkpoint, Conv2d, Graph, ParamStore, Tensor, Var};

pub const CRM_KIND: &str = "crm";
/// Sub-band channels of an RGB image.
pub const PLANE_CHANNELS: usize = 12;
/// The keyed secret rotation mixes colour within LL and, separately, the
/// nine detail channels, so band energies are preserved.
const ROTATION_BLOCKS: [usize; 2] = [3, 9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrmConfig {
    pub deep_blocks: usize,
    pub shallow_blocks: usize,
    pub width: usize,
    /// Bound on the log-scale of each affine coupling.
    pub clamp: f64,
    pub key_channels: usize,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self { deep_blocks: 3, shallow_blocks: 3, width: 32, clamp: 2.0, key_channels: 4 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Subnet {
    c1: Conv2d,
    c2: Conv2d,
}

impl Subnet {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, width: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(p, &format!("{name}.c1"), c_in, width, 3, 1, 1.0, rng),
            c2: Conv2d::new(p, &format!("{name}.c2"), width, c_out, 3, 1, 0.1, rng),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.c2.forward(p, self.c1.forward(p, x).silu())
    }
}

/// `a' = a + φ(b)`, `b' = b·exp(s(a')) + η(a')` with `s = clamp·(2σ(ρ) − 1)`.
#[derive(Clone, Copy, Debug)]
struct Coupling {
    phi: Subnet,
    psi: Subnet,
}

fn with_key<'g>(x: Var<'g>, k: Option<Var<'g>>) -> Var<'g> {
    match k {
        Some(k) => x.graph().cat(&[x, k], 1),
        None => x,
    }
}

impl Coupling {
    fn scale_shift<'g>(&self, p: &Bound<'g>, a: Var<'g>, k: Option<Var<'g>>, clamp: f64) -> (Var<'g>, Var<'g>) {
        let t = self.psi.forward(p, with_key(a, k));
        let s = t.narrow(1, 0, PLANE_CHANNELS).sigmoid().scale(2.0 * clamp).add_scalar(-clamp);
        (s, t.narrow(1, PLANE_CHANNELS, PLANE_CHANNELS))
    }

    fn forward<'g>(&self, p: &Bound<'g>, a: Var<'g>, b: Var<'g>, k: Option<Var<'g>>, clamp: f64) -> (Var<'g>, Var<'g>) {
        let a = a.add(self.phi.forward(p, with_key(b, k)));
        let (s, eta) = self.scale_shift(p, a, k, clamp);
        (a, b.mul(s.exp()).add(eta))
    }

    fn inverse<'g>(&self, p: &Bound<'g>, a: Var<'g>, b: Var<'g>, k: Option<Var<'g>>, clamp: f64) -> (Var<'g>, Var<'g>) {
        let (s, eta) = self.scale_shift(p, a, k, clamp);
        let b = b.sub(eta).mul(s.scale(-1.0).exp());
        (a.sub(self.phi.forward(p, with_key(b, k))), b)
    }
}

/// Key material bound into a graph for a batch: conditioning channels
/// `[N, key_channels, h, w]` and a per-sample orthogonal sub-band rotation
/// applied to the secret before hiding (and undone after recovery).
#[derive(Clone)]
pub struct KeyVars<'g> {
    cond: Var<'g>,
    rot: Vec<Var<'g>>,
    rot_t: Vec<Var<'g>>,
}

fn rotate<'g>(x: Var<'g>, mats: &[Var<'g>]) -> Var<'g> {
    let parts: Vec<Var<'g>> = mats.iter().enumerate().map(|(i, m)| x.narrow(0, i, 1).conv2d(*m, None, 1, 0)).collect();
    match parts.as_slice() {
        [one] => *one,
        _ => x.graph().cat(&parts, 0),
    }
}

fn transpose(q: &Tensor) -> Tensor {
    let n = q.dim(0);
    let d = q.data();
    Tensor::new(vec![n, n], (0..n * n).map(|i| d[(i % n) * n + i / n]).collect())
}

/// Nested hiding network: a key-conditioned deep stack that hides the secret
/// in the cover, and a key-free shallow stack that hides the decoy on top.
#[derive(Clone, Debug)]
pub struct Crm {
    cfg: CrmConfig,
    params: ParamStore,
    deep: Vec<Coupling>,
    shallow: Vec<Coupling>,
    trained: bool,
}

fn batch1(t: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(s)
}

fn unbatch(v: Var<'_>) -> Result<WaveletPlanes> {
    let t = v.to_tensor();
    let s = t.shape()[1..].to_vec();
    WaveletPlanes::from_stacked(&t.reshape(s))
}

impl Crm {
    pub fn new(cfg: CrmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (c, w, kc) = (PLANE_CHANNELS, cfg.width, cfg.key_channels);
        let deep = (0..cfg.deep_blocks)
            .map(|i| Coupling {
                phi: Subnet::new(&mut p, &format!("deep{i}.phi"), c + kc, w, c, &mut rng),
                psi: Subnet::new(&mut p, &format!("deep{i}.psi"), c + kc, w, 2 * c, &mut rng),
            })
            .collect();
        let shallow = (0..cfg.shallow_blocks)
            .map(|i| Coupling {
                phi: Subnet::new(&mut p, &format!("shallow{i}.phi"), c, w, c, &mut rng),
                psi: Subnet::new(&mut p, &format!("shallow{i}.psi"), c, w, 2 * c, &mut rng),
            })
            .collect();
        Self { cfg, params: p, deep, shallow, trained: false }
    }

    pub fn config(&self) -> CrmConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Rounds parameters to their stored precision so a reloaded checkpoint
    /// behaves identically.
    pub fn round_params(&mut self) {
        self.params.round_to_f32();
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.params.bind(g, trainable)
    }

    /// `[key_channels, h, w]` conditioning for planes of spatial size `h×w`.
    pub fn key_conditioning(&self, key: &ProtectionKey, h: usize, w: usize) -> Tensor {
        key_expand(key, &[self.cfg.key_channels, h, w])
    }

    /// One key per batch sample, for planes of spatial size `h×w`.
    pub fn key_vars<'g>(&self, g: &'g Graph, keys: &[ProtectionKey], h: usize, w: usize) -> KeyVars<'g> {
        let ks: Vec<Tensor> = keys.iter().map(|k| self.key_conditioning(k, h, w)).collect();
        let c = PLANE_CHANNELS;
        let qs: Vec<Tensor> = keys.iter().map(|k| key_rotation(k, &ROTATION_BLOCKS)).collect();
        KeyVars {
            cond: g.constant(Tensor::stack(&ks.iter().collect::<Vec<_>>())),
            rot: qs.iter().map(|q| g.constant(q.clone().reshape(vec![c, c, 1, 1]))).collect(),
            rot_t: qs.iter().map(|q| g.constant(transpose(q).reshape(vec![c, c, 1, 1]))).collect(),
        }
    }

    /// Stego and lost-information branches of the deep stack. All tensors
    /// are `[N, 12, h, w]`.
    pub fn deep_embed_var<'g>(&self, p: &Bound<'g>, a: Var<'g>, b: Var<'g>, k: &KeyVars<'g>) -> (Var<'g>, Var<'g>) {
        let b = rotate(b.sub(a), &k.rot);
        self.deep.iter().fold((a, b), |(a, b), blk| blk.forward(p, a, b, Some(k.cond), self.cfg.clamp))
    }

    pub fn deep_invert_var<'g>(&self, p: &Bound<'g>, h: Var<'g>, r: Var<'g>, k: &KeyVars<'g>) -> (Var<'g>, Var<'g>) {
        let (a, b) =
            self.deep.iter().rev().fold((h, r), |(a, b), blk| blk.inverse(p, a, b, Some(k.cond), self.cfg.clamp));
        (a, a.add(rotate(b, &k.rot_t)))
    }

    pub fn shallow_embed_var<'g>(&self, p: &Bound<'g>, h: Var<'g>, d: Var<'g>) -> (Var<'g>, Var<'g>) {
        self.shallow.iter().fold((h, d), |(a, b), blk| blk.forward(p, a, b, None, self.cfg.clamp))
    }

    pub fn shallow_invert_var<'g>(&self, p: &Bound<'g>, x: Var<'g>, r: Var<'g>) -> (Var<'g>, Var<'g>) {
        self.shallow.iter().rev().fold((x, r), |(a, b), blk| blk.inverse(p, a, b, None, self.cfg.clamp))
    }

    fn check_pair(a: &WaveletPlanes, b: &WaveletPlanes) -> Result<()> {
        if a.ll.shape() != b.ll.shape() {
            return Err(SiderError::Shape(format!("sub-bands {:?} vs {:?}", a.ll.shape(), b.ll.shape())));
        }
        Ok(())
    }

    fn run_pair(
        &self,
        a: &WaveletPlanes,
        b: &WaveletPlanes,
        key: Option<&ProtectionKey>,
        f: impl for<'g> Fn(&Self, &Bound<'g>, Var<'g>, Var<'g>, Option<&KeyVars<'g>>) -> (Var<'g>, Var<'g>),
    ) -> Result<(WaveletPlanes, WaveletPlanes)> {
        Self::check_pair(a, b)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let s = a.ll.shape();
        let k = key.map(|k| self.key_vars(&g, std::slice::from_ref(k), s[1], s[2]));
        let (x, y) = f(self, &p, g.constant(batch1(&a.stacked())), g.constant(batch1(&b.stacked())), k.as_ref());
        Ok((unbatch(x)?, unbatch(y)?))
    }

    /// Hides `secret` in `cover` under `key`; returns `(h_inter, r_deep)`.
    pub fn deep_embed(
        &self,
        cover: &WaveletPlanes,
        secret: &WaveletPlanes,
        key: &ProtectionKey,
    ) -> Result<(WaveletPlanes, WaveletPlanes)> {
        self.run_pair(cover, secret, Some(key), |m, p, a, b, k| m.deep_embed_var(p, a, b, k.expect("keyed")))
    }

    /// Returns `(cover', secret')`.
    pub fn deep_invert(
        &self,
        h_inter: &WaveletPlanes,
        key: &ProtectionKey,
        r: &WaveletPlanes,
    ) -> Result<(WaveletPlanes, WaveletPlanes)> {
        self.run_pair(h_inter, r, Some(key), |m, p, a, b, k| m.deep_invert_var(p, a, b, k.expect("keyed")))
    }

    /// Hides `decoy` in `h_inter`; returns `(protected, r_shallow)`.
    pub fn shallow_embed(
        &self,
        h_inter: &WaveletPlanes,
        decoy: &WaveletPlanes,
    ) -> Result<(WaveletPlanes, WaveletPlanes)> {
        self.run_pair(h_inter, decoy, None, |m, p, a, b, _| m.shallow_embed_var(p, a, b))
    }

    /// Returns `(h_inter', decoy')`.
    pub fn shallow_invert(
        &self,
        protected: &WaveletPlanes,
        r: &WaveletPlanes,
    ) -> Result<(WaveletPlanes, WaveletPlanes)> {
        self.run_pair(protected, r, None, |m, p, a, b, _| m.shallow_invert_var(p, a, b))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.cfg, "trained": self.trained });
        Checkpoint::new(CRM_KIND, meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, CRM_KIND)?;
        let cfg: CrmConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let mut crm = Self::new(cfg, 0);
        ckpt.restore_into(&mut crm.params)?;
        crm.trained = ckpt.meta["trained"].as_bool().unwrap_or(false);
        Ok(crm)
    }
}

/// Standard-normal stand-in for a discarded auxiliary branch.
pub fn gaussian_aux(rng: &mut ChaCha8Rng, h: usize, w: usize) -> WaveletPlanes {
    WaveletPlanes::from_stacked(&Tensor::randn(vec![PLANE_CHANNELS, h, w], rng)).expect("12 channels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crm::wavelet::dwt;
    use crate::data::Image;
    use rand::Rng;

    fn planes(seed: u64, side: usize) -> WaveletPlanes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dwt(&Image::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()])).unwrap()
    }

    fn max_err(a: &WaveletPlanes, b: &WaveletPlanes) -> f64 {
        a.stacked().max_abs_diff(&b.stacked())
    }

    fn small() -> CrmConfig {
        CrmConfig { deep_blocks: 2, shallow_blocks: 2, width: 8, ..CrmConfig::default() }
    }

    #[test]
    fn deep_roundtrip_with_true_aux() {
        let crm = Crm::new(small(), 1);
        let key = ProtectionKey::generate_with(&mut ChaCha8Rng::seed_from_u64(2));
        let (a, b) = (planes(3, 16), planes(4, 16));
        let (h, r) = crm.deep_embed(&a, &b, &key).unwrap();
        assert_eq!(h.ll.shape(), a.ll.shape());
        assert_eq!(r.ll.shape(), b.ll.shape());
        let (a2, b2) = crm.deep_invert(&h, &key, &r).unwrap();
        assert!(max_err(&a, &a2) < 1e-4);
        assert!(max_err(&b, &b2) < 1e-4);
    }

    #[test]
    fn wrong_key_breaks_deep_inversion() {
        let crm = Crm::new(small(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..20 {
            let key = ProtectionKey::generate_with(&mut rng);
            let wrong = ProtectionKey::generate_with(&mut rng);
            let (a, b) = (planes(10 + i, 16), planes(40 + i, 16));
            let (h, r) = crm.deep_embed(&a, &b, &key).unwrap();
            let good = max_err(&b, &crm.deep_invert(&h, &key, &r).unwrap().1);
            let bad = max_err(&b, &crm.deep_invert(&h, &wrong, &r).unwrap().1);
            assert!(bad >= 10.0 * good.max(1e-12), "trial {i}: correct {good}, wrong {bad}");
        }
    }

    #[test]
    fn shallow_roundtrip_and_determinism() {
        let crm = Crm::new(small(), 7);
        let (h, d) = (planes(8, 16), planes(9, 16));
        let (x, r) = crm.shallow_embed(&h, &d).unwrap();
        let (h2, d2) = crm.shallow_invert(&x, &r).unwrap();
        assert!(max_err(&h, &h2) < 1e-4);
        assert!(max_err(&d, &d2) < 1e-4);
        let z = gaussian_aux(&mut ChaCha8Rng::seed_from_u64(1), 8, 8);
        assert_eq!(crm.shallow_invert(&x, &z).unwrap(), crm.shallow_invert(&x, &z).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let crm = Crm::new(small(), 7);
        assert!(crm.shallow_embed(&planes(1, 16), &planes(2, 8)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let crm = Crm::new(small(), 11);
        let back = Crm::from_checkpoint(&Checkpoint::from_bytes(&crm.to_checkpoint().to_bytes()).unwrap()).unwrap();
        let (h, d) = (planes(1, 8), planes(2, 8));
        let (x1, _) = back.shallow_embed(&h, &d).unwrap();
        let (x2, _) = crm.shallow_embed(&h, &d).unwrap();
        assert!(max_err(&x1, &x2) < 1e-5);
        assert!(!back.is_trained());
    }
}
