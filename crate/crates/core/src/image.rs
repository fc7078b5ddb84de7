//! Single-channel image containers.
//!
//! Two pixel representations are used throughout the crate: 8-bit images
//! (what gets written to PNG after windowing and CLAHE) and unit-interval
//! `f32` images (what the networks and metrics consume).

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type Gray8 = Gray<u8>;
pub type GrayF = Gray<f32>;

impl<T: Copy> Gray<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image with {} pixels",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Gray<U> {
        Gray { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

impl Gray8 {
    pub fn to_unit(&self) -> GrayF {
        self.map(|v| v as f32 / 255.0)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma8();
        let (w, h) = img.dimensions();
        Self::from_vec(h as usize, w as usize, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
        Ok(buf)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

impl GrayF {
    /// Quantize to 8 bits, clamping to [0, 1] first.
    pub fn to_u8(&self) -> Gray8 {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?)
    }

    /// Stack same-sized images into a `(n, 1, h, w)` tensor.
    pub fn batch_to_tensor(images: &[&GrayF], device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyManifest)?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {h}x{w} and {}x{}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?)
    }

    /// Split a `(n, 1, h, w)` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<GrayF>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("expected 1 channel, got {c}")));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat.chunks(h * w).take(n).map(|c| GrayF { height: h, width: w, data: c.to_vec() }).collect())
    }
}
