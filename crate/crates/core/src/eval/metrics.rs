//! Full-reference image similarity: PSNR, SSIM and MS-SSIM on unit-range
//! grayscale images. All arithmetic is f64.

use crate::data::pyramid::area_half;
use crate::error::{Error, Result};
use crate::image::GrayF;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Per-level weights of the five-scale MS-SSIM, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn same_shape(a: &GrayF, b: &GrayF) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(max_val² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &GrayF, b: &GrayF, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-region separable filtering of a row-major `h × w` field.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|j| k[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term over every valid window.
pub fn ssim_and_cs(a: &GrayF, b: &GrayF, p: &SsimParams) -> Result<(f64, f64)> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < p.window || w < p.window {
        return Err(Error::TooSmall(format!("{h}x{w} is smaller than the {0}x{0} window", p.window)));
    }
    let k = p.kernel();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, _, _) = filter_valid(&x, h, w, &k);
    let (my, _, _) = filter_valid(&y, h, w, &k);
    let (mxx, _, _) = filter_valid(&prod(&x, &x), h, w, &k);
    let (myy, _, _) = filter_valid(&prod(&y, &y), h, w, &k);
    let (mxy, _, _) = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (p.c1(), p.c2());
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        let lum = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        s_sum += lum * cs;
        cs_sum += cs;
    }
    let n = mx.len() as f64;
    Ok((s_sum / n, cs_sum / n))
}

pub fn ssim_with(a: &GrayF, b: &GrayF, p: &SsimParams) -> Result<f64> {
    Ok(ssim_and_cs(a, b, p)?.0)
}

/// Mean SSIM with the standard Gaussian 11×11, σ = 1.5 window.
pub fn ssim(a: &GrayF, b: &GrayF) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Largest level count (at most 5) whose coarsest image still holds a
/// full window.
pub fn ms_ssim_levels(h: usize, w: usize, window: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&l| h.min(w) >= window << (l - 1)).unwrap_or(1)
}

/// MS-SSIM over `levels` dyadic scales with the standard weights of the
/// first `levels` entries, renormalized to sum to one. Negative terms are
/// clamped at zero before exponentiation.
pub fn ms_ssim_with(a: &GrayF, b: &GrayF, levels: usize, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Config(format!("MS-SSIM supports 1 to 5 levels, got {levels}")));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut acc = 1.0;
    for (j, w) in MS_SSIM_WEIGHTS[..levels].iter().enumerate() {
        let (s, cs) = ssim_and_cs(&x, &y, p)?;
        let term = if j + 1 == levels { s } else { cs };
        acc *= term.max(0.0).powf(w / wsum);
        if j + 1 < levels {
            x = area_half(&x)?;
            y = area_half(&y)?;
        }
    }
    Ok(acc)
}

/// MS-SSIM with as many of the five levels as the image size allows.
pub fn ms_ssim(a: &GrayF, b: &GrayF) -> Result<f64> {
    let p = SsimParams::default();
    ms_ssim_with(a, b, ms_ssim_levels(a.height(), a.width(), p.window), &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayF {
        GrayF::from_fn(h, w, |_, _| rng.random::<f32>())
    }

    /// Direct-formula PSNR.
    fn psnr_oracle(a: &GrayF, b: &GrayF) -> f64 {
        let mut se = 0.0;
        for y in 0..a.height() {
            for x in 0..a.width() {
                let d = a.get(y, x) as f64 - b.get(y, x) as f64;
                se += d * d;
            }
        }
        let mse = se / (a.height() * a.width()) as f64;
        if mse == 0.0 {
            PSNR_CAP
        } else {
            20.0 * (1.0 / mse.sqrt()).log10()
        }
    }

    /// Sliding-window SSIM: explicit 2-D Gaussian weights and weighted
    /// moments at every valid window position.
    fn ssim_oracle(a: &GrayF, b: &GrayF) -> f64 {
        let (n, sigma) = (11usize, 1.5f64);
        let c = 5.0;
        let mut wts = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma))).exp();
                total += *v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let (h, w) = a.dims();
        let mut sum = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = wts[i][j] / total;
                        ma += wt * a.get(y0 + i, x0 + j) as f64;
                        mb += wt * b.get(y0 + i, x0 + j) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = wts[i][j] / total;
                        let da = a.get(y0 + i, x0 + j) as f64 - ma;
                        let db = b.get(y0 + i, x0 + j) as f64 - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn psnr_closed_forms() {
        let a = GrayF::filled(8, 8, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 1.0 / 255.0);
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-4);
        assert!(matches!(psnr(&a, &GrayF::filled(8, 9, 0.0), 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn psnr_and_ssim_match_direct_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random(&mut rng, 64, 64);
            let b = random(&mut rng, 64, 64);
            assert!((psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-9);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_identity_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 20, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&GrayF::filled(10, 30, 0.0), &GrayF::filled(10, 30, 0.0)), Err(Error::TooSmall(_))));
        assert!(matches!(ssim(&a, &GrayF::filled(20, 21, 0.0)), Err(Error::ShapeMismatch(_))));
        // Constant windows are guarded by the stabilizing constants.
        let c = GrayF::filled(16, 16, 0.3);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&c, &GrayF::filled(16, 16, 0.31)).unwrap() < 1.0);
    }

    #[test]
    fn ms_ssim_level_handling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(ms_ssim_levels(224, 224, 11), 5);
        assert_eq!(ms_ssim_levels(64, 64, 11), 3);
        assert_eq!(ms_ssim_levels(11, 11, 11), 1);
        let a = random(&mut rng, 176, 176);
        let b = random(&mut rng, 176, 176);
        let p = SsimParams::default();
        for l in 1..=5 {
            assert!((ms_ssim_with(&a, &a, l, &p).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((ms_ssim_with(&a, &b, 1, &p).unwrap() - ssim(&a, &b).unwrap().max(0.0)).abs() < 1e-9);
        let m = ms_ssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn blur_degrades_every_metric() {
        let sharp = GrayF::from_fn(64, 64, |y, x| if (y / 8 + x / 8) % 2 == 0 { 0.9 } else { 0.1 });
        let blurred = crate::data::resize_image(&area_half(&sharp).unwrap(), 64, 64, crate::data::ResizeMethod::Bicubic).unwrap();
        assert!(psnr(&sharp, &blurred, 1.0).unwrap() < 40.0);
        assert!(ssim(&sharp, &blurred).unwrap() < 1.0);
        assert!(ms_ssim(&sharp, &blurred).unwrap() < 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_are_symmetric_and_flip_invariant(seed in any::<u64>(), size in 16usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, size, size + 3);
            let b = random(&mut rng, size, size + 3);
            let (fa, fb) = (a.flip_horizontal(), b.flip_horizontal());
            let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
            prop_assert!(close(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap()));
            prop_assert!(close(psnr(&a, &b, 1.0).unwrap(), psnr(&fa, &fb, 1.0).unwrap()));
            prop_assert!(close(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap()));
            prop_assert!(close(ssim(&a, &b).unwrap(), ssim(&fa, &fb).unwrap()));
            prop_assert!(close(ms_ssim(&a, &b).unwrap(), ms_ssim(&b, &a).unwrap()));
            // Coarser levels are stored in f32 and mirrored area taps may round differently.
            let d = (ms_ssim(&a, &b).unwrap() - ms_ssim(&fa, &fb).unwrap()).abs();
            prop_assert!(d < 1e-6, "{}", d);
            prop_assert!(ssim(&a, &b).unwrap() < 1.0);
        }
    }
}
