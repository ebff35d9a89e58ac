use crate::data::Image;
use crate::error::{Result, SiderError};
use crate::nn::{haar_forward, haar_inverse, Tensor};

/// Single-level orthonormal Haar sub-bands, each `[3, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPlanes {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletPlanes {
    /// Bands stacked on the channel axis as `[12, H/2, W/2]` (LL, LH, HL, HH).
    pub fn stacked(&self) -> Tensor {
        let s = self.ll.shape().to_vec();
        let mut data = Vec::with_capacity(4 * self.ll.len());
        for b in [&self.ll, &self.lh, &self.hl, &self.hh] {
            data.extend_from_slice(b.data());
        }
        Tensor::new(vec![4 * s[0], s[1], s[2]], data)
    }

    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 12 {
            return Err(SiderError::Shape(format!("expected [12, h, w] sub-bands, got {s:?}")));
        }
        let band = t.len() / 4;
        let part = |i: usize| Tensor::new(vec![3, s[1], s[2]], t.data()[i * band..(i + 1) * band].to_vec());
        Ok(Self { ll: part(0), lh: part(1), hl: part(2), hh: part(3) })
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh].iter().flat_map(|b| b.data()).map(|v| v * v).sum()
    }
}

pub fn dwt_tensor(x: &Tensor) -> Result<WaveletPlanes> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(SiderError::Shape(format!("expected [3, H, W], got {s:?}")));
    }
    if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(SiderError::Shape(format!("wavelet transform needs even sides, got {}×{}", s[2], s[1])));
    }
    let mut out = vec![0.0; x.len()];
    haar_forward(x.data(), 3, s[1], s[2], &mut out);
    WaveletPlanes::from_stacked(&Tensor::new(vec![12, s[1] / 2, s[2] / 2], out))
}

pub fn dwt(x: &Image) -> Result<WaveletPlanes> {
    dwt_tensor(&x.to_tensor())
}

/// Synthesis back to a `[3, H, W]` tensor; values are not clamped.
pub fn idwt(p: &WaveletPlanes) -> Tensor {
    let st = p.stacked();
    let (h, w) = (st.dim(1) * 2, st.dim(2) * 2);
    let mut out = vec![0.0; st.len()];
    haar_inverse(st.data(), 3, h, w, &mut out);
    Tensor::new(vec![3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn constant_image_is_dc_only() {
        let p = dwt(&Image::filled(8, 6, [0.25, 0.5, 0.75])).unwrap();
        for (c, want) in [0.25, 0.5, 0.75].iter().enumerate() {
            for v in &p.ll.data()[c * 12..(c + 1) * 12] {
                assert!((v - 2.0 * want).abs() < 1e-12);
            }
        }
        for b in [&p.lh, &p.hl, &p.hh] {
            assert!(b.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn odd_sides_rejected() {
        assert!(dwt(&Image::filled(7, 8, [0.0; 3])).is_err());
        assert!(dwt(&Image::filled(8, 5, [0.0; 3])).is_err());
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_energy(seed in any::<u64>(), hw in 1usize..8, hh in 1usize..8) {
            let x = random_image(seed, 2 * hw, 2 * hh);
            let p = dwt(&x).unwrap();
            let back = idwt(&p);
            prop_assert!(back.max_abs_diff(&x.to_tensor()) < 1e-6);
            let e: f64 = x.to_tensor().data().iter().map(|v| v * v).sum();
            prop_assert!((p.energy() - e).abs() <= 1e-6 * e.max(1e-12));
        }
    }
}
