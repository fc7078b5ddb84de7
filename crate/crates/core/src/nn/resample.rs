use candle_core::{DType, Tensor};

use crate::data::resize::{resize_matrix, ResizeMethod};
use crate::error::Result;

fn matrix(in_len: usize, out_len: usize, method: ResizeMethod, dtype: DType, x: &Tensor) -> Result<Tensor> {
    let m = resize_matrix(in_len, out_len, method);
    Ok(Tensor::from_vec(m, (out_len, in_len), x.device())?.to_dtype(dtype)?)
}

/// Differentiable separable resize of `(b, c, h, w)` to `(b, c, out_h,
/// out_w)`, using the same kernels as [`crate::data::resize_image`].
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rw = matrix(w, out_w, method, x.dtype(), x)?;
    let rh = matrix(h, out_h, method, x.dtype(), x)?;
    let y = x.reshape((b * c * h, w))?.matmul(&rw.t()?)?;
    let y = y.reshape((b, c, h, out_w))?.transpose(2, 3)?.contiguous()?.reshape((b * c * out_w, h))?;
    let y = y.matmul(&rh.t()?)?;
    Ok(y.reshape((b, c, out_w, out_h))?.transpose(2, 3)?.contiguous()?)
}
