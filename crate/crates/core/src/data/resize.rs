//! Separable resampling.
//!
//! Both methods are expressed as per-axis tap lists, which the tensor code
//! in the generator turns into dense interpolation matrices, so the image
//! path and the differentiable path share one definition of the kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Gray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    /// Cubic convolution with a = -0.5, half-pixel centers, replicated border.
    Bicubic,
    /// Box average over the covered input area.
    Area,
}

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(t: f64) -> f64 {
    let a = CUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// For each output index, the contributing `(input index, weight)` pairs.
pub fn axis_taps(in_len: usize, out_len: usize, method: ResizeMethod) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| match method {
            ResizeMethod::Bicubic => {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let x0 = src.floor();
                let t = src - x0;
                (-1..=2)
                    .map(|k| {
                        let idx = (x0 as i64 + k).clamp(0, in_len as i64 - 1) as usize;
                        (idx, cubic_kernel(t - k as f64))
                    })
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            }
            ResizeMethod::Area => {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < in_len {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, overlap / scale));
                    }
                    j += 1;
                }
                taps
            }
        })
        .collect()
}

/// Dense row-major `(out_len, in_len)` interpolation matrix.
pub fn resize_matrix(in_len: usize, out_len: usize, method: ResizeMethod) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (i, taps) in axis_taps(in_len, out_len, method).into_iter().enumerate() {
        for (j, w) in taps {
            m[i * in_len + j] += w;
        }
    }
    m
}

pub trait Pixel: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Pixel for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

impl Pixel for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Pixel for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub fn resize_image<T: Pixel>(img: &Gray<T>, target_h: usize, target_w: usize, method: ResizeMethod) -> Result<Gray<T>> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::WrongShape { expected: "target dims >= 1".into(), actual: format!("{target_h}x{target_w}") });
    }
    let (h, w) = img.dims();
    let col_taps = axis_taps(w, target_w, method);
    let row_taps = axis_taps(h, target_h, method);
    // Horizontal pass in f64, then vertical.
    let mut tmp = vec![0.0f64; h * target_w];
    for y in 0..h {
        let row = img.row(y);
        for (x, taps) in col_taps.iter().enumerate() {
            tmp[y * target_w + x] = taps.iter().map(|&(j, wt)| row[j].to_f64() * wt).sum();
        }
    }
    let mut out = Vec::with_capacity(target_h * target_w);
    for taps in &row_taps {
        for x in 0..target_w {
            let v: f64 = taps.iter().map(|&(j, wt)| tmp[j * target_w + x] * wt).sum();
            out.push(T::from_f64(v));
        }
    }
    Gray::from_vec(target_h, target_w, out)
}

/// Area resize when shrinking along both axes, bicubic otherwise.
pub fn auto_method(from: (usize, usize), to: (usize, usize)) -> ResizeMethod {
    if to.0 <= from.0 && to.1 <= from.1 {
        ResizeMethod::Area
    } else {
        ResizeMethod::Bicubic
    }
}
