//! Synthetic pelvic-MRI-like slices for examples, tests and smoke runs.
//!
//! Each slice is a layered arrangement of ellipses (body outline, fat
//! rim, gland with a brighter peripheral zone, bladder, rectum) with smooth
//! texture and noise, stored as 12-bit intensities. An optional focal
//! lesion lets the same generator produce a labeled classification task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dicom::{RawSlice, SeriesKind};

#[derive(Clone, Copy, Debug)]
pub struct PhantomSpec {
    pub size: usize,
    pub lesion: bool,
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { size: 256, lesion: false, noise: 25.0 }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Signed normalized radius: < 1 inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn smoothstep(edge: f64, soft: f64, r: f64) -> f64 {
    // 1 inside, 0 outside, linear ramp of width `soft` around the edge.
    ((edge + soft - r) / (2.0 * soft)).clamp(0.0, 1.0)
}

pub fn phantom_slice(seed: u64, patient: &str, slice_index: u32, spec: PhantomSpec) -> RawSlice {
    let mut h = 1469598103934665603u64;
    for b in patient.bytes() {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h ^ ((slice_index as u64) << 32));
    let n = spec.size as f64;
    let j = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..a);

    let body = Ellipse { cy: 0.5 + j(&mut rng, 0.03), cx: 0.5 + j(&mut rng, 0.03), ry: 0.36 + j(&mut rng, 0.03), rx: 0.45 + j(&mut rng, 0.03), angle: j(&mut rng, 0.1) };
    let gland = Ellipse { cy: 0.55 + j(&mut rng, 0.04), cx: 0.5 + j(&mut rng, 0.04), ry: 0.11 + j(&mut rng, 0.02), rx: 0.14 + j(&mut rng, 0.02), angle: j(&mut rng, 0.3) };
    let bladder = Ellipse { cy: gland.cy - 0.2 + j(&mut rng, 0.02), cx: 0.5 + j(&mut rng, 0.05), ry: 0.08 + j(&mut rng, 0.03), rx: 0.12 + j(&mut rng, 0.03), angle: j(&mut rng, 0.3) };
    let rectum = Ellipse { cy: gland.cy + 0.17 + j(&mut rng, 0.02), cx: 0.5 + j(&mut rng, 0.03), ry: 0.05 + j(&mut rng, 0.01), rx: 0.06 + j(&mut rng, 0.01), angle: 0.0 };
    let bones: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse { cy: 0.55 + j(&mut rng, 0.03), cx: 0.5 + side * (0.3 + j(&mut rng, 0.02)), ry: 0.07, rx: 0.05, angle: 0.0 })
        .collect();
    let lesion = spec.lesion.then(|| {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.2..0.6);
        Ellipse { cy: gland.cy + r * gland.ry * a.sin(), cx: gland.cx + r * gland.rx * a.cos(), ry: 0.03, rx: 0.035, angle: 0.0 }
    });

    // Smooth texture from a handful of random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.random_range(4.0..22.0);
            let t = rng.random_range(0.0..std::f64::consts::PI);
            (f * t.cos(), f * t.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(10.0..45.0))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(1e-9)).expect("finite");
    let soft = 1.5 / n;

    let mut pixels = Vec::with_capacity(spec.size * spec.size);
    for yi in 0..spec.size {
        for xi in 0..spec.size {
            let (y, x) = ((yi as f64 + 0.5) / n, (xi as f64 + 0.5) / n);
            let rb = body.radius(y, x);
            let inside = smoothstep(1.0, soft / body.rx, rb);
            let fat = inside * (1.0 - smoothstep(0.88, soft / body.rx, rb));
            let mut v = 60.0 + inside * 700.0 + fat * 900.0;
            let texture: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin()).sum();
            v += inside * texture;
            let rg = gland.radius(y, x);
            let g = smoothstep(1.0, soft / gland.rx, rg);
            let peripheral = smoothstep(1.0, soft / gland.rx, rg) * (1.0 - smoothstep(0.7, soft / gland.rx, rg));
            v += g * -150.0 + peripheral * 350.0;
            v += smoothstep(1.0, soft / bladder.rx, bladder.radius(y, x)) * 1500.0;
            v += smoothstep(1.0, soft / rectum.rx, rectum.radius(y, x)) * -500.0;
            for b in &bones {
                v += smoothstep(1.0, soft / b.rx, b.radius(y, x)) * -450.0;
            }
            if let Some(l) = &lesion {
                v += smoothstep(1.0, soft / l.rx, l.radius(y, x)) * -420.0;
            }
            v += noise.sample(&mut rng);
            pixels.push(v.clamp(0.0, 4095.0) as u16);
        }
    }

    RawSlice {
        height: spec.size,
        width: spec.size,
        pixels,
        wl: 1200.0,
        ww: 2400.0,
        patient_id: patient.to_string(),
        series_kind: SeriesKind::Axial,
        slice_index,
    }
}
