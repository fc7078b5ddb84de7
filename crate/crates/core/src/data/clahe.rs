//! Contrast-limited adaptive histogram equalization.
//!
//! Tile histograms are clipped at `clip_limit × tile_area / 256` (at least
//! one count), the excess is spread uniformly with the remainder dealt out
//! at a fixed stride, and each pixel blends the equalization maps of its
//! four nearest tile centers bilinearly. Images that the grid does not
//! divide are reflect-padded for the histogram pass only.

use serde::{Deserialize, Serialize};

use crate::image::Gray8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub clip_limit: f64,
    /// Tiles along (rows, columns).
    pub tile_grid: (usize, usize),
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { clip_limit: 2.0, tile_grid: (8, 8) }
    }
}

const BINS: usize = 256;

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Clip a histogram in place and redistribute the excess.
pub fn clip_histogram(hist: &mut [u32; BINS], clip: u32) {
    let mut excess: u32 = 0;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let batch = excess / BINS as u32;
    let mut residual = excess - batch * BINS as u32;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (BINS as u32 / residual).max(1) as usize;
        let mut i = 0;
        while i < BINS && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
}

fn equalization_map(hist: &[u32; BINS], area: usize) -> [u8; BINS] {
    let scale = (BINS - 1) as f64 / area as f64;
    let mut lut = [0u8; BINS];
    let mut sum = 0u64;
    for (i, &h) in hist.iter().enumerate() {
        sum += h as u64;
        lut[i] = (sum as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

pub fn apply_clahe(img: &Gray8, params: ClaheParams) -> Gray8 {
    let (h, w) = img.dims();
    let first = img.data()[0];
    if img.data().iter().all(|&v| v == first) {
        return img.clone();
    }
    let (ty, tx) = (params.tile_grid.0.clamp(1, h), params.tile_grid.1.clamp(1, w));
    let tile_h = h.div_ceil(ty);
    let tile_w = w.div_ceil(tx);
    let area = tile_h * tile_w;
    let clip = if params.clip_limit > 0.0 {
        Some(((params.clip_limit * area as f64 / BINS as f64) as u32).max(1))
    } else {
        None
    };

    let mut luts = vec![[0u8; BINS]; ty * tx];
    for r in 0..ty {
        for c in 0..tx {
            let mut hist = [0u32; BINS];
            for y in r * tile_h..(r + 1) * tile_h {
                let sy = reflect101(y as isize, h);
                for x in c * tile_w..(c + 1) * tile_w {
                    hist[img.get(sy, reflect101(x as isize, w)) as usize] += 1;
                }
            }
            if let Some(clip) = clip {
                clip_histogram(&mut hist, clip);
            }
            luts[r * tx + c] = equalization_map(&hist, area);
        }
    }

    // Per-column interpolation coordinates are shared by every row.
    let col_coords: Vec<(usize, usize, f64)> = (0..w)
        .map(|x| {
            let f = x as f64 / tile_w as f64 - 0.5;
            let c1 = f.floor();
            let a = f - c1;
            let c1i = c1 as isize;
            ((c1i.max(0)) as usize, ((c1i + 1) as usize).min(tx - 1), a)
        })
        .collect();

    Gray8::from_fn(h, w, |y, x| {
        let f = y as f64 / tile_h as f64 - 0.5;
        let r1 = f.floor();
        let ya = f - r1;
        let r1i = r1 as isize;
        let (r1, r2) = ((r1i.max(0)) as usize, ((r1i + 1) as usize).min(ty - 1));
        let (c1, c2, xa) = col_coords[x];
        let v = img.get(y, x) as usize;
        let top = luts[r1 * tx + c1][v] as f64 * (1.0 - xa) + luts[r1 * tx + c2][v] as f64 * xa;
        let bot = luts[r2 * tx + c1][v] as f64 * (1.0 - xa) + luts[r2 * tx + c2][v] as f64 * xa;
        (top * (1.0 - ya) + bot * ya).round().clamp(0.0, 255.0) as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Straightforward per-pixel CLAHE: every output pixel rebuilds the
    /// histograms of its surrounding tiles from scratch.
    fn oracle(img: &Gray8, clip_limit: f64, ty: usize, tx: usize) -> Gray8 {
        let (h, w) = img.dims();
        if img.data().iter().all(|&v| v == img.data()[0]) {
            return img.clone();
        }
        let th = (h + ty - 1) / ty;
        let tw = (w + tx - 1) / tx;
        let area = (th * tw) as f64;
        let clip = ((clip_limit * area / 256.0).floor() as u64).max(1);
        let pad = |i: i64, n: usize| -> usize {
            let n = n as i64;
            if n == 1 {
                return 0;
            }
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * (n - 1) - i;
                } else {
                    return i as usize;
                }
            }
        };
        let map_value = |r: usize, c: usize, v: usize| -> f64 {
            let mut hist = vec![0u64; 256];
            for y in 0..th {
                for x in 0..tw {
                    let py = pad((r * th + y) as i64, h);
                    let px = pad((c * tw + x) as i64, w);
                    hist[img.get(py, px) as usize] += 1;
                }
            }
            let mut excess = 0;
            for b in hist.iter_mut() {
                if *b > clip {
                    excess += *b - clip;
                    *b = clip;
                }
            }
            for b in hist.iter_mut() {
                *b += excess / 256;
            }
            let mut left = excess % 256;
            if left > 0 {
                let step = std::cmp::max(256 / left, 1) as usize;
                let mut i = 0;
                while i < 256 && left > 0 {
                    hist[i] += 1;
                    left -= 1;
                    i += step;
                }
            }
            let cum: u64 = hist[..=v].iter().sum();
            (cum as f64 * 255.0 / area).round().min(255.0)
        };
        Gray8::from_fn(h, w, |y, x| {
            let fy = (y as f64 + 0.0) / th as f64 - 0.5;
            let fx = x as f64 / tw as f64 - 0.5;
            let (ry, rx) = (fy.floor(), fx.floor());
            let (wy, wx) = (fy - ry, fx - rx);
            let clampi = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
            let v = img.get(y, x) as usize;
            let m = |r: f64, c: f64| map_value(clampi(r, ty), clampi(c, tx), v);
            let val = (1.0 - wy) * ((1.0 - wx) * m(ry, rx) + wx * m(ry, rx + 1.0))
                + wy * ((1.0 - wx) * m(ry + 1.0, rx) + wx * m(ry + 1.0, rx + 1.0));
            val.round() as u8
        })
    }

    #[test]
    fn constant_image_is_returned_unchanged() {
        let img = Gray8::filled(32, 32, 77);
        assert_eq!(apply_clahe(&img, ClaheParams::default()), img);
    }

    #[test]
    fn two_tile_image_matches_oracle() {
        let img = Gray8::from_fn(16, 32, |_, x| if x < 16 { 50 } else { 200 });
        let p = ClaheParams { clip_limit: 2.0, tile_grid: (1, 2) };
        assert_eq!(apply_clahe(&img, p), oracle(&img, 2.0, 1, 2));
    }

    #[test]
    fn random_images_match_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(h, w, ty, tx, clip) in &[(64, 64, 8, 8, 2.0), (33, 47, 4, 3, 3.0), (20, 64, 2, 8, 1.0), (64, 40, 5, 5, 40.0)] {
            let lo: u8 = rng.random_range(0..100);
            let img = Gray8::from_fn(h, w, |y, x| lo.saturating_add(((y * 3 + x) % 40) as u8 + rng.random_range(0..30)));
            let p = ClaheParams { clip_limit: clip, tile_grid: (ty, tx) };
            assert_eq!(apply_clahe(&img, p), oracle(&img, clip, ty, tx), "{h}x{w} grid {ty}x{tx}");
        }
    }

    #[test]
    fn redistribution_conserves_mass() {
        let mut hist = [0u32; 256];
        hist[10] = 700;
        hist[11] = 84;
        clip_histogram(&mut hist, 6);
        assert_eq!(hist.iter().sum::<u32>(), 784);
    }
}
