use std::path::Path;

use image::{imageops::FilterType, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Result, SiderError};
use crate::nn::Tensor;

/// RGB image, row-major H×W×3, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(SiderError::Shape(format!("{} values for a {width}×{height}×3 image", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SiderError::Argument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let c = rgb.map(|v| v.clamp(0.0, 1.0));
        let data = (0..width * height).flat_map(|_| c).collect();
        Self { width, height, data }
    }

    /// Builds from a per-pixel closure; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// CHW tensor of shape `[3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + p] = px[c] as f64;
            }
        }
        Tensor::new(vec![3, h, w], out)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `[3,H,W]` or `[1,3,H,W]` and clamps.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(SiderError::Shape(format!("expected [3,H,W] image tensor, got {s:?}"))),
        };
        let d = t.data();
        let mut data = Vec::with_capacity(3 * w * h);
        for p in 0..w * h {
            for c in 0..3 {
                let v = d[c * w * h + p];
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 });
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Round-trips through 8-bit storage.
    pub fn quantize(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize_u8(v as f64) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize_u8(v as f64)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer sized for image")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        crate::nn::write_atomic(path, buf.get_ref())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Center square crop followed by a resize to `resolution`².
    pub fn center_crop_resize(img: &RgbImage, resolution: usize) -> Self {
        let (w, h) = img.dimensions();
        let side = w.min(h);
        let crop = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let r = resolution as u32;
        let resized = if side == r { crop } else { image::imageops::resize(&crop, r, r, FilterType::Triangle) };
        Self::from_rgb8(&resized)
    }

    /// Mean over pixels of the Euclidean RGB distance.
    pub fn mean_l2_distance(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "image shape mismatch");
        let total: f64 = self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt())
            .sum();
        total / (self.width * self.height) as f64
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Hex SHA-256 over the 8-bit rendering of every image, in order.
pub fn hash_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update((img.width as u32).to_le_bytes());
        h.update((img.height as u32).to_le_bytes());
        h.update(img.to_rgb8().as_raw());
    }
    hex::encode(h.finalize())
}
