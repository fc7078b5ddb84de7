use rand::Rng;

use super::resize::{resize_image, ResizeMethod};
use crate::error::{Error, Result};
use crate::image::GrayF;

pub const HR_SIZE: usize = 224;
pub const LR_SIZE: usize = 28;

/// One training sample at every scale: 28, 56, 112 and 224 pixels square.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub lr: GrayF,
    pub x2: GrayF,
    pub x4: GrayF,
    pub x8: GrayF,
}

impl ScalePyramid {
    /// Levels from coarsest to finest.
    pub fn levels(&self) -> [&GrayF; 4] {
        [&self.lr, &self.x2, &self.x4, &self.x8]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            lr: self.lr.flip_horizontal(),
            x2: self.x2.flip_horizontal(),
            x4: self.x4.flip_horizontal(),
            x8: self.x8.flip_horizontal(),
        }
    }
}

/// Halve both sides by 2×2 box averaging.
pub fn area_half(img: &GrayF) -> Result<GrayF> {
    resize_image(img, img.height() / 2, img.width() / 2, ResizeMethod::Area)
}

pub fn build_pyramid(hr: &GrayF) -> Result<ScalePyramid> {
    if hr.dims() != (HR_SIZE, HR_SIZE) {
        return Err(Error::WrongShape {
            expected: format!("{HR_SIZE}x{HR_SIZE}"),
            actual: format!("{}x{}", hr.height(), hr.width()),
        });
    }
    let x4 = area_half(hr)?;
    let x2 = area_half(&x4)?;
    let lr = area_half(&x2)?;
    Ok(ScalePyramid { lr, x2, x4, x8: hr.clone() })
}

/// Flip every level together with probability 1/2. Returns whether it
/// flipped.
pub fn augment_flip<R: Rng + ?Sized>(pyramid: &ScalePyramid, rng: &mut R) -> (ScalePyramid, bool) {
    if rng.random_bool(0.5) {
        (pyramid.flip_horizontal(), true)
    } else {
        (pyramid.clone(), false)
    }
}
