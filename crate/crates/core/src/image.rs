//! In-memory images with intensities in `[0, 1]` and their 8-bit PNG encoding.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::fsio;

/// Row-major, channel-interleaved (H×W×C) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image buffer has {} values, expected {}×{}×{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Clamps to `[0,1]` and snaps every value to the nearest multiple of 1/255,
    /// so the image survives a PNG round trip unchanged.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_value(*v);
        }
    }

    /// Planar (C×H×W) copy used as network input.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[(ch * h + r) * w + col] = self.data[(r * w + col) * c + ch];
                }
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let dynimg = match self.channels {
            1 => GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                .map(DynamicImage::ImageLuma8),
            3 => RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                .map(DynamicImage::ImageRgb8),
            c => {
                return Err(Error::Input(format!("unsupported channel count {c}")));
            }
        }
        .ok_or_else(|| Error::Input("image buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        dynimg
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    /// Decodes a PNG; grayscale stays single-channel, everything else becomes RGB.
    pub fn from_png_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let dynimg = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
            Error::Image {
                path: origin.to_string(),
                message: e.to_string(),
            }
        })?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let (channels, raw) = match dynimg {
            DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
                (1, dynimg.to_luma8().into_raw())
            }
            other => (3, other.to_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_vec(h, w, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fsio::read(path)?;
        Self::from_png_bytes(&bytes, &path.display().to_string())
    }
}

#[inline]
pub fn quantize_value(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel `[0,1]` field as 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let img = Image::from_vec(height, width, 1, values.to_vec())?;
    img.save_png(path)
}
