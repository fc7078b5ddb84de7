//! Single-pass custom ops for the activations and resampling that run on
//! full-resolution feature maps, where candle's composed versions spend
//! several extra passes per backward.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn contiguous_slice<'a, T>(data: &'a [T], l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{what}: operand must be contiguous"),
    }
}

/// Apply `f` elementwise to an f32 or f64 storage.
fn map1(s: &CpuStorage, l: &Layout, what: &str, f: impl Fn(f64) -> f64) -> candle_core::Result<CpuStorage> {
    Ok(match s {
        CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, l, what)?.iter().map(|&x| f(x as f64) as f32).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, l, what)?.iter().map(|&x| f(x)).collect()),
        _ => candle_core::bail!("{what}: only f32/f64 supported"),
    })
}

/// `g * f(x)` elementwise, for `(x, g)` storages of the same dtype.
fn map2(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    what: &str,
    f: impl Fn(f64) -> f64,
) -> candle_core::Result<CpuStorage> {
    Ok(match (s1, s2) {
        (CpuStorage::F32(x), CpuStorage::F32(g)) => {
            let (x, g) = (contiguous_slice(x, l1, what)?, contiguous_slice(g, l2, what)?);
            CpuStorage::F32(x.iter().zip(g).map(|(&x, &g)| g * f(x as f64) as f32).collect())
        }
        (CpuStorage::F64(x), CpuStorage::F64(g)) => {
            let (x, g) = (contiguous_slice(x, l1, what)?, contiguous_slice(g, l2, what)?);
            CpuStorage::F64(x.iter().zip(g).map(|(&x, &g)| g * f(x)).collect())
        }
        _ => candle_core::bail!("{what}: mismatched or unsupported dtypes"),
    })
}

struct LeakyRelu(f64);
struct LeakyReluGrad(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "msrgan-leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let a = self.0;
        Ok((map1(s, l, self.name(), |x| if x > 0.0 { x } else { a * x })?, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "msrgan-leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let a = self.0;
        Ok((map2(s1, l1, s2, l2, self.name(), |x| if x > 0.0 { 1.0 } else { a })?, l1.shape().clone()))
    }
}

struct Clamp(f64, f64);
struct ClampGrad(f64, f64);

impl CustomOp1 for Clamp {
    fn name(&self) -> &'static str {
        "msrgan-clamp"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (lo, hi) = (self.0, self.1);
        Ok((map1(s, l, self.name(), |x| x.max(lo).min(hi))?, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &ClampGrad(self.0, self.1))?))
    }
}

impl CustomOp2 for ClampGrad {
    fn name(&self) -> &'static str {
        "msrgan-clamp-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (lo, hi) = (self.0, self.1);
        let pass = |x: f64| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 };
        Ok((map2(s1, l1, s2, l2, self.name(), pass)?, l1.shape().clone()))
    }
}

struct Nearest2x;
struct Nearest2xGrad;

fn up2x<T: Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

fn down2x_sum<T: Copy + std::ops::Add<Output = T>>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let r0 = &g[(p * 2 * h + 2 * y) * ow..(p * 2 * h + 2 * y + 1) * ow];
            let r1 = &g[(p * 2 * h + 2 * y + 1) * ow..(p * 2 * h + 2 * y + 2) * ow];
            for x in 0..w {
                out.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

impl CustomOp1 for Nearest2x {
    fn name(&self) -> &'static str {
        "msrgan-nearest2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let storage = match s {
            CpuStorage::F32(v) => CpuStorage::F32(up2x(contiguous_slice(v, l, self.name())?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(up2x(contiguous_slice(v, l, self.name())?, b * c, h, w)),
            _ => candle_core::bail!("nearest2x: only f32/f64 supported"),
        };
        Ok((storage, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Nearest2xGrad)?))
    }
}

impl CustomOp1 for Nearest2xGrad {
    fn name(&self) -> &'static str {
        "msrgan-nearest2x-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let storage = match s {
            CpuStorage::F32(v) => CpuStorage::F32(down2x_sum(contiguous_slice(v, l, self.name())?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(down2x_sum(contiguous_slice(v, l, self.name())?, b * c, h, w)),
            _ => candle_core::bail!("nearest2x: only f32/f64 supported"),
        };
        Ok((storage, Shape::from((b, c, h, w))))
    }
}

pub fn leaky_relu_op(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

/// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
pub fn clamp_op(x: &Tensor, lo: f64, hi: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Clamp(lo, hi))
}

pub fn nearest2x_op(x: &Tensor) -> candle_core::Result<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Nearest2x)
}
