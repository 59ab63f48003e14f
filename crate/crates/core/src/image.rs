//! Row-major float images and their on-disk formats.
//!
//! Two encodings are supported: 8-bit PNG (values in `[0, 1]` scaled linearly
//! to `0..=255`) and `DGEIMG1`, a lossless raw format:
//!
//! ```text
//! b"DGEIMG1" | width: u32 LE | height: u32 LE | channels: u32 LE | data: f32 LE * (w*h*c)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Real;

pub const DGEIMG_MAGIC: &[u8; 7] = b"DGEIMG1";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image shape mismatch: {0}")]
    Shape(String),
    #[error("bad DGEIMG1 data: {0}")]
    Format(String),
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T: Real> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `+0.5`). Returns `None` outside the region covered by pixel centers.
    pub fn sample_bilinear(&self, x: T, y: T, c: usize) -> Option<T> {
        let half = T::lit(0.5);
        let fx = x - half;
        let fy = y - half;
        let max_x = T::of_usize(self.width - 1);
        let max_y = T::of_usize(self.height - 1);
        if !(fx >= T::zero() && fy >= T::zero() && fx <= max_x && fy <= max_y) {
            return None;
        }
        let x0 = fx.floor().as_f64() as usize;
        let y0 = fy.floor().as_f64() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - T::of_usize(x0);
        let ty = fy - T::of_usize(y0);
        let one = T::one();
        let top = self.get(x0, y0, c) * (one - tx) + self.get(x1, y0, c) * tx;
        let bottom = self.get(x0, y1, c) * (one - tx) + self.get(x1, y1, c) * tx;
        Some(top * (one - ty) + bottom * ty)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_dgeimg<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        w.write_all(DGEIMG_MAGIC)?;
        for dim in [self.width, self.height, self.channels] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dgeimg<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != DGEIMG_MAGIC {
            return Err(ImageError::Format("missing DGEIMG1 magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| ImageError::Format("dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(ImageError::Format(format!("expected {} data bytes, found {}", count * 4, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Self::from_data(dims[0], dims[1], dims[2], data)
    }

    pub fn save_dgeimg(&self, path: &Path) -> Result<(), ImageError> {
        let file = std::fs::File::create(path)?;
        self.write_dgeimg(std::io::BufWriter::new(file))
    }

    pub fn load_dgeimg(path: &Path) -> Result<Self, ImageError> {
        let file = std::fs::File::open(path)?;
        Self::read_dgeimg(std::io::BufReader::new(file))
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and scaled to 255.
    /// Only 1- and 3-channel images are supported.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(ImageError::Shape(format!("cannot write {c}-channel png"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|b| T::lit(b as f64 / 255.0)).collect();
        Self::from_data(w, h, channels, data)
    }
}

/// Mean squared error over all samples.
pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, ImageError> {
    a.check_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, `10 log10(1 / MSE)`.
/// Identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, ImageError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
