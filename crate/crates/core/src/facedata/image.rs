use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB face crop with unit-range channel values, stored row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::DimensionMismatch(format!("channel value {v} outside [0, 1]")));
        }
        Ok(FaceImage { width, height, data })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        FaceImage {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)?;
        Ok(FaceImage::from_rgb8(&img.into_rgb8()))
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

    pub fn pixel(&self, x: usize, y: usize) -> [f32; CHANNELS] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantizes back to 8-bit; exact inverse of [`FaceImage::from_rgb8`].
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }

    /// Splits into non-overlapping patches, row-major over the patch grid. Each
    /// patch vector is ordered (row, column, channel).
    pub fn patchify(&self, patch_size: usize) -> Result<Vec<f32>> {
        if patch_size == 0 || !self.width.is_multiple_of(patch_size) || !self.height.is_multiple_of(patch_size) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image is not divisible by patch size {patch_size}",
                self.width, self.height
            )));
        }
        let gw = self.width / patch_size;
        let gh = self.height / patch_size;
        let dim = patch_size * patch_size * CHANNELS;
        let mut out = vec![0f32; gw * gh * dim];
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = gy * gw + gx;
                for py in 0..patch_size {
                    let src = ((gy * patch_size + py) * self.width + gx * patch_size) * CHANNELS;
                    let dst = patch * dim + py * patch_size * CHANNELS;
                    let len = patch_size * CHANNELS;
                    out[dst..dst + len].copy_from_slice(&self.data[src..src + len]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`FaceImage::patchify`].
    pub fn unpatchify(patches: &[f32], width: usize, height: usize, patch_size: usize) -> Result<Self> {
        let gw = width / patch_size;
        let dim = patch_size * patch_size * CHANNELS;
        if !width.is_multiple_of(patch_size) || !height.is_multiple_of(patch_size) || patches.len() != width * height * CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{} patch values do not tile a {width}x{height} image with patch {patch_size}",
                patches.len()
            )));
        }
        let mut data = vec![0f32; width * height * CHANNELS];
        for (patch, chunk) in patches.chunks_exact(dim).enumerate() {
            let (gy, gx) = (patch / gw, patch % gw);
            for py in 0..patch_size {
                let dst = ((gy * patch_size + py) * width + gx * patch_size) * CHANNELS;
                let src = py * patch_size * CHANNELS;
                let len = patch_size * CHANNELS;
                data[dst..dst + len].copy_from_slice(&chunk[src..src + len]);
            }
        }
        FaceImage::new(width, height, data)
    }
}
