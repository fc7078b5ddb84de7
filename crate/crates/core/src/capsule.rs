//! Capsule primitives: the squash nonlinearity, primary-capsule formation
//! and routing-by-agreement between capsule layers.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{softmax, Builder, Init};

/// `v = ‖s‖²/(1+‖s‖²) · s/‖s‖` along the last dimension, evaluated as
/// `s · ‖s‖/(1+‖s‖²)`. The norm's argument is floored at the smallest
/// positive normal so the zero vector gets a finite gradient; any other
/// vector is untouched.
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let sq = s.sqr()?.sum_keepdim(D::Minus1)?;
    let floor = match s.dtype() {
        DType::F64 => f64::MIN_POSITIVE,
        _ => f32::MIN_POSITIVE as f64,
    };
    let scale = (sq.maximum(floor)?.sqrt()? / (&sq + 1.0)?)?;
    Ok(s.broadcast_mul(&scale)?)
}

/// Capsule vector lengths: `(..., dim) -> (...)`.
pub fn capsule_norms(v: &Tensor) -> Result<Tensor> {
    Ok(v.sqr()?.sum(D::Minus1)?.sqrt()?)
}

/// Turn a `(b, types·dim, h, w)` map into `(b, types·h·w, dim)` squashed
/// capsules. Capsule `t·h·w + y·w + x` is the `dim`-channel slice of type
/// `t` at position `(y, x)`.
pub fn primary_capsules(features: &Tensor, types: usize, dim: usize) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if c != types * dim {
        return Err(Error::ShapeMismatch(format!(
            "primary capsules need {types}x{dim} = {} channels, got {c}",
            types * dim
        )));
    }
    let caps = features
        .reshape((b, types, dim, h, w))?
        .permute((0, 1, 3, 4, 2))?
        .contiguous()?
        .reshape((b, types * h * w, dim))?;
    squash(&caps)
}

/// Result of routing: output capsules and the coupling coefficients used
/// at every iteration.
pub struct Routed {
    /// `(b, out_caps, out_dim)`
    pub v: Tensor,
    /// One `(b, in_caps, out_caps)` tensor per iteration.
    pub couplings: Vec<Tensor>,
}

/// Routing-by-agreement over predictions `u_hat: (b, in_caps, out_caps,
/// out_dim)`. Logits start at zero for every call and every sample.
pub fn dynamic_routing(u_hat: &Tensor, iterations: usize) -> Result<Routed> {
    let (b, i, j, _) = u_hat.dims4()?;
    let iterations = iterations.max(1);
    let mut logits = Tensor::zeros((b, i, j), u_hat.dtype(), u_hat.device())?;
    let mut couplings = Vec::with_capacity(iterations);
    let mut v = None;
    for it in 0..iterations {
        let c = softmax(&logits, 2)?;
        let s = u_hat.broadcast_mul(&c.unsqueeze(3)?)?.sum(1)?;
        let out = squash(&s)?;
        if it + 1 < iterations {
            let agreement = u_hat.broadcast_mul(&out.unsqueeze(1)?)?.sum(3)?;
            logits = (logits + agreement)?;
        }
        couplings.push(c);
        v = Some(out);
    }
    Ok(Routed { v: v.expect("at least one iteration"), couplings })
}

/// Fully connected capsule layer with learned per-pair transforms
/// `W[i, j]: in_dim -> out_dim` and dynamic routing.
#[derive(Clone, Debug)]
pub struct RoutedCapsuleLayer {
    /// `(in_caps, out_caps, out_dim, in_dim)`
    weight: Tensor,
    pub in_caps: usize,
    pub in_dim: usize,
    pub out_caps: usize,
    pub out_dim: usize,
    pub iterations: usize,
}

impl RoutedCapsuleLayer {
    pub fn new(
        mut b: Builder<'_>,
        in_caps: usize,
        in_dim: usize,
        out_caps: usize,
        out_dim: usize,
        iterations: usize,
    ) -> Result<Self> {
        let weight = b.param("weight", &[in_caps, out_caps, out_dim, in_dim], Init::Uniform { fan_in: in_dim })?;
        Ok(Self { weight, in_caps, in_dim, out_caps, out_dim, iterations })
    }

    pub fn num_params(&self) -> usize {
        self.in_caps * self.out_caps * self.out_dim * self.in_dim
    }

    /// Predictions `û_{j|i} = W_ij u_i` as `(b, in_caps, out_caps, out_dim)`.
    pub fn predictions(&self, u: &Tensor) -> Result<Tensor> {
        let (b, i, d) = u.dims3()?;
        if i != self.in_caps || d != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "capsule layer expects {}x{} inputs, got {i}x{d}",
                self.in_caps, self.in_dim
            )));
        }
        // One GEMM per input capsule: (J·D, in_dim) x (in_dim, b).
        let w = self.weight.reshape((i, self.out_caps * self.out_dim, d))?;
        let ut = u.permute((1, 2, 0))?.contiguous()?;
        let pred = w.matmul(&ut)?;
        Ok(pred.permute((2, 0, 1))?.contiguous()?.reshape((b, i, self.out_caps, self.out_dim))?)
    }

    pub fn forward(&self, u: &Tensor) -> Result<Routed> {
        dynamic_routing(&self.predictions(u)?, self.iterations)
    }
}
