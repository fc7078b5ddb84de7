use super::dicom::RawSlice;
use crate::error::{Error, Result};
use crate::image::Gray8;

/// Map one raw intensity through a (level, width) window to 8 bits.
#[inline]
pub fn window_value(x: f64, wl: f64, ww: f64) -> u8 {
    let t = ((x - (wl - ww / 2.0)) / ww).clamp(0.0, 1.0);
    (255.0 * t).round() as u8
}

/// Linear window/level mapping to an 8-bit image of the same size.
pub fn apply_window(slice: &RawSlice) -> Result<Gray8> {
    if !(slice.ww > 0.0) {
        return Err(Error::DegenerateWindow(slice.ww));
    }
    let data = slice.pixels.iter().map(|&p| window_value(p as f64, slice.wl, slice.ww)).collect();
    Gray8::from_vec(slice.height, slice.width, data)
}
