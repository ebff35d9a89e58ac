use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SiderError};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "path")]
pub enum MaskMode {
    Oval,
    Full,
    External(PathBuf),
}

/// Binary mask on the latent grid, broadcast over latent channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

/// Centre and semi-axes of the oval, in normalized crop coordinates `[-1, 1]`.
const OVAL: (f64, f64, f64, f64) = (0.0, 0.05, 0.62, 0.8);

impl FaceMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|v| *v > 1) {
            return Err(SiderError::Argument("mask must be a binary grid of the stated size".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![1; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn support_ratio(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Majority vote over equal blocks: a cell is on when more than half its pixels are.
    pub fn downsample(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || !self.height.is_multiple_of(height) || !self.width.is_multiple_of(width) {
            return Err(SiderError::Shape(format!(
                "cannot pool a {}×{} mask to {height}×{width}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / height, self.width / width);
        let mut out = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                let mut on = 0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        on += self.at(y * fy + dy, x * fx + dx) as usize;
                    }
                }
                out[y * width + x] = (2 * on > fy * fx) as u8;
            }
        }
        Ok(Self { height, width, values: out })
    }

    /// Latent-sized tensor of the mask repeated over `channels`.
    pub fn broadcast(&self, channels: usize) -> Tensor {
        let plane: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
        Tensor::new(vec![channels, self.height, self.width], data)
    }
}

fn oval_pixels(size: usize) -> FaceMask {
    let (cx, cy, a, b) = OVAL;
    let mut values = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let u = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (py as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            values.push((((u - cx) / a).powi(2) + ((v - cy) / b).powi(2) <= 1.0) as u8);
        }
    }
    FaceMask { height: size, width: size, values }
}

fn load_external(path: &Path, size: usize) -> Result<FaceMask> {
    if !path.exists() {
        return Err(SiderError::MaskNotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Nearest);
    let values = img.as_raw().iter().map(|&p| (p as f64 / 255.0 >= 0.5) as u8).collect();
    Ok(FaceMask { height: size, width: size, values })
}

/// Mask for a square image of side `image_size` on a `[C,h,w]` latent grid.
pub fn make_mask(image_size: usize, latent_shape: [usize; 3], mode: &MaskMode) -> Result<FaceMask> {
    let [_, h, w] = latent_shape;
    match mode {
        MaskMode::Full => Ok(FaceMask::ones(h, w)),
        MaskMode::Oval => oval_pixels(image_size).downsample(h, w),
        MaskMode::External(p) => load_external(p, image_size)?.downsample(h, w),
    }
}
