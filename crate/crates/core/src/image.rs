//! Dense row-major `H x W x C` float images and their file formats.

use std::path::Path;

use crate::error::{Error, Result};

/// Magic for the raw float image format: `b"RIMG"`, then H, W, channels as
/// little-endian u32, then `H*W*C` little-endian f32 in row-major HWC order.
pub const RAW_IMAGE_MAGIC: [u8; 4] = *b"RIMG";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Single channel `c` as a new one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 && self.channels != 1 {
            return Err(Error::Shape(format!("cannot export {} channels as RGB", self.channels)));
        }
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Ok(image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            if self.channels == 1 {
                image::Rgb([q(p[0]); 3])
            } else {
                image::Rgb([q(p[0]), q(p[1]), q(p[2])])
            }
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(&RAW_IMAGE_MAGIC);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != RAW_IMAGE_MAGIC {
            return Err(Error::Format("not a raw float image".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (u(4), u(8), u(12));
        let n = height * width * channels;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!(
                "raw image payload is {} bytes, expected {}",
                bytes.len() - 16,
                4 * n
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Image::from_data(width, height, channels, data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::DegenerateInput("empty image".into()));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// PSNR in dB for images with peak value 1; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * m.log10())
    }
}
