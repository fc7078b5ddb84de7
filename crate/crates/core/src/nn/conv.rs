//! 2-D convolution as a candle custom op.
//!
//! Forward and both backward passes lower to GEMMs over im2col buffers
//! built for a band of output rows at a time, so the column matrix stays
//! cache-sized regardless of image or batch size.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    fn pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

trait Elem: Copy + Default + std::ops::AddAssign + Send + Sync + 'static {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
    fn view(s: &CpuStorage) -> Option<&[Self]>;
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

impl Elem for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn view(s: &CpuStorage) -> Option<&[Self]> {
        match s {
            CpuStorage::F32(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Elem for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn view(s: &CpuStorage) -> Option<&[Self]> {
        match s {
            CpuStorage::F64(v) => Some(v),
            _ => None,
        }
    }
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

/// Output columns `[lo, hi)` whose input column `ox + off` is inside the
/// row, for stride 1.
fn valid_span(ow: usize, width: usize, off: isize) -> (usize, usize) {
    let lo = (-off).clamp(0, ow as isize) as usize;
    let hi = (width as isize - off).clamp(lo as isize, ow as isize) as usize;
    (lo, hi)
}

/// Column matrix for output rows `band`, laid out `[rows, band_len * ow]`.
fn im2col<T: Elem>(g: &ConvGeometry, x: &[T], band: std::ops::Range<usize>, cols: &mut [T]) {
    let ow = g.out_w();
    let l = band.len() * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[r * l..(r + 1) * l];
                let off = kj as isize - g.padding as isize;
                for (j, oy) in band.clone().enumerate() {
                    let d = &mut dst[j * ow..(j + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(ow, g.width, off);
                        d[..lo].fill(T::zero());
                        d[hi..].fill(T::zero());
                        let s0 = (lo as isize + off) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for (ox, dv) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            *dv = if ix >= 0 && ix < g.width as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(g: &ConvGeometry, cols: &[T], band: std::ops::Range<usize>, x: &mut [T]) {
    let ow = g.out_w();
    let l = band.len() * ow;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[r * l..(r + 1) * l];
                let off = kj as isize - g.padding as isize;
                for (j, oy) in band.clone().enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[j * ow..(j + 1) * ow];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(ow, g.width, off);
                        let r0 = (lo as isize + off) as usize;
                        for (dv, sv) in row[r0..r0 + hi - lo].iter_mut().zip(&s[lo..hi]) {
                            *dv += *sv;
                        }
                    } else {
                        for (ox, sv) in s.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && ix < g.width as isize {
                                row[ix as usize] += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: Elem>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::view(s).ok_or_else(|| candle_core::Error::Msg("conv2d: unsupported dtype".into()))?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: operand must be contiguous"),
    }
}

/// Output-row bands small enough for a band's column matrix to stay in
/// cache.
fn bands(g: &ConvGeometry) -> Vec<std::ops::Range<usize>> {
    const BAND_ELEMS: usize = 1 << 17;
    let per_row = g.col_rows() * g.out_w();
    let rows = (BAND_ELEMS / per_row.max(1)).clamp(1, g.out_h());
    (0..g.out_h()).step_by(rows).map(|a| a..(a + rows).min(g.out_h())).collect()
}

fn forward<T: Elem>(g: &ConvGeometry, batch: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, l, ow) = (g.col_rows(), g.col_len(), g.out_w());
    let o = g.out_channels;
    let mut out = vec![T::zero(); batch * o * l];
    let bands = bands(g);
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); rows * bands[0].len() * ow] };
    for b in 0..batch {
        let xb = &x[b * g.in_channels * g.in_plane()..(b + 1) * g.in_channels * g.in_plane()];
        let yb = &mut out[b * o * l..(b + 1) * o * l];
        if g.pointwise() {
            // y[o, l] = w[o, c] . x[c, l]
            unsafe {
                T::gemm(o, rows, l, w.as_ptr(), rows as isize, 1, xb.as_ptr(), l as isize, 1, T::zero(), yb.as_mut_ptr(), l as isize, 1);
            }
            continue;
        }
        for band in &bands {
            let lc = band.len() * ow;
            im2col(g, xb, band.clone(), &mut cols);
            // y[o, band] = w[o, rows] . cols[rows, band]
            unsafe {
                T::gemm(o, rows, lc, w.as_ptr(), rows as isize, 1, cols.as_ptr(), lc as isize, 1, T::zero(), yb.as_mut_ptr().add(band.start * ow), l as isize, 1);
            }
        }
    }
    out
}

fn backward_input<T: Elem>(g: &ConvGeometry, batch: usize, gy: &[T], w: &[T]) -> Vec<T> {
    let (rows, l, ow) = (g.col_rows(), g.col_len(), g.out_w());
    let o = g.out_channels;
    let per = g.in_channels * g.in_plane();
    let mut gx = vec![T::zero(); batch * per];
    let bands = bands(g);
    let mut gcols = vec![T::zero(); rows * bands[0].len() * ow];
    for b in 0..batch {
        let gyb = &gy[b * o * l..(b + 1) * o * l];
        let gxb = &mut gx[b * per..(b + 1) * per];
        if g.pointwise() {
            // gx[c, l] = w^T[c, o] . gy[o, l]
            unsafe {
                T::gemm(rows, o, l, w.as_ptr(), 1, rows as isize, gyb.as_ptr(), l as isize, 1, T::zero(), gxb.as_mut_ptr(), l as isize, 1);
            }
            continue;
        }
        for band in &bands {
            let lc = band.len() * ow;
            // gcols[rows, band] = w^T[rows, o] . gy[o, band]
            unsafe {
                T::gemm(rows, o, lc, w.as_ptr(), 1, rows as isize, gyb.as_ptr().add(band.start * ow), l as isize, 1, T::zero(), gcols.as_mut_ptr(), lc as isize, 1);
            }
            col2im(g, &gcols[..rows * lc], band.clone(), gxb);
        }
    }
    gx
}

fn backward_weight<T: Elem>(g: &ConvGeometry, batch: usize, x: &[T], gy: &[T]) -> Vec<T> {
    let (rows, l, ow) = (g.col_rows(), g.col_len(), g.out_w());
    let o = g.out_channels;
    let mut gw = vec![T::zero(); o * rows];
    let bands = bands(g);
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); rows * bands[0].len() * ow] };
    let mut first = true;
    for b in 0..batch {
        let xb = &x[b * g.in_channels * g.in_plane()..(b + 1) * g.in_channels * g.in_plane()];
        let gyb = &gy[b * o * l..(b + 1) * o * l];
        if g.pointwise() {
            let beta = if first { T::zero() } else { T::one() };
            first = false;
            // gw[o, c] += gy[o, l] . x^T[l, c]
            unsafe {
                T::gemm(o, l, rows, gyb.as_ptr(), l as isize, 1, xb.as_ptr(), 1, l as isize, beta, gw.as_mut_ptr(), rows as isize, 1);
            }
            continue;
        }
        for band in &bands {
            let lc = band.len() * ow;
            im2col(g, xb, band.clone(), &mut cols);
            let beta = if first { T::zero() } else { T::one() };
            first = false;
            // gw[o, rows] += gy[o, band] . cols^T[band, rows]
            unsafe {
                T::gemm(o, lc, rows, gyb.as_ptr().add(band.start * ow), l as isize, 1, cols.as_ptr(), 1, lc as isize, beta, gw.as_mut_ptr(), rows as isize, 1);
            }
        }
    }
    gw
}

struct Conv2dOp(ConvGeometry);
struct Conv2dInputGrad(ConvGeometry);
struct Conv2dWeightGrad(ConvGeometry);

macro_rules! dispatch {
    ($s:expr, $f:ident, $($args:expr),*) => {
        match $s {
            CpuStorage::F32(_) => Ok(f32::wrap($f::<f32>($($args),*)?)),
            CpuStorage::F64(_) => Ok(f64::wrap($f::<f64>($($args),*)?)),
            _ => Err(candle_core::Error::Msg("conv2d: only f32/f64 supported".into())),
        }
    };
}

fn run_forward<T: Elem>(g: &ConvGeometry, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<Vec<T>> {
    let x = contiguous::<T>(s1, l1)?;
    let w = contiguous::<T>(s2, l2)?;
    Ok(forward(g, l1.dims()[0], x, w))
}

fn run_input_grad<T: Elem>(g: &ConvGeometry, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<Vec<T>> {
    let gy = contiguous::<T>(s1, l1)?;
    let w = contiguous::<T>(s2, l2)?;
    Ok(backward_input(g, l1.dims()[0], gy, w))
}

fn run_weight_grad<T: Elem>(g: &ConvGeometry, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<Vec<T>> {
    let x = contiguous::<T>(s1, l1)?;
    let gy = contiguous::<T>(s2, l2)?;
    Ok(backward_weight(g, l1.dims()[0], x, gy))
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "msrgan-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let storage = dispatch!(s1, run_forward, g, s1, l1, s2, l2)?;
        Ok((storage, Shape::from((l1.dims()[0], g.out_channels, g.out_h(), g.out_w()))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &Conv2dInputGrad(self.0))?;
        let gw = x.apply_op2_no_bwd(&grad, &Conv2dWeightGrad(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "msrgan-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let storage = dispatch!(s1, run_input_grad, g, s1, l1, s2, l2)?;
        Ok((storage, Shape::from((l1.dims()[0], g.in_channels, g.height, g.width))))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "msrgan-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let storage = dispatch!(s1, run_weight_grad, g, s1, l1, s2, l2)?;
        Ok((storage, Shape::from((g.out_channels, g.in_channels, g.kernel_h, g.kernel_w))))
    }
}

/// Cross-correlation of `x: (b, c, h, w)` with `weight: (o, c, kh, kw)`,
/// symmetric zero padding. Differentiable in both operands.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if c != wc {
        candle_core::bail!("conv2d: input has {c} channels, kernel expects {wc}");
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        candle_core::bail!("conv2d: {h}x{w} input smaller than {kh}x{kw} kernel");
    }
    let g = ConvGeometry {
        in_channels: c,
        out_channels: o,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp(g))
}
