use candle_core::{Tensor, D};

use super::conv::conv2d;
use super::params::{Builder, Init};
use crate::error::Result;

/// Negative slope used by every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// `kernel`×`kernel`, stride 1, same padding, with bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: kernel / 2, bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + if self.bias { self.out_channels } else { 0 }
    }
}

impl Conv2d {
    pub fn new(mut b: Builder<'_>, spec: ConvSpec) -> Result<Self> {
        Self::with_init(&mut b, spec, Init::Kaiming { fan_in: spec.in_channels * spec.kernel * spec.kernel, slope: LEAKY_SLOPE })
    }

    /// All-zero weights and bias.
    pub fn zeros(mut b: Builder<'_>, spec: ConvSpec) -> Result<Self> {
        Self::with_init(&mut b, spec, Init::Zeros)
    }

    fn with_init(b: &mut Builder<'_>, spec: ConvSpec, init: Init) -> Result<Self> {
        let weight = b.param("weight", &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel], init)?;
        let bias = if spec.bias { Some(b.param("bias", &[spec.out_channels], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, stride: spec.stride, padding: spec.padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(mut b: Builder<'_>, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = b.param("weight", &[outputs, inputs], Init::Uniform { fan_in: inputs })?;
        let bias = b.param("bias", &[outputs], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Batch normalization in inference form. Running statistics are parameters
/// of a frozen store, so they are counted as non-trainable.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
}

impl BatchNorm {
    pub fn new(mut b: Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[channels], Init::Ones)?,
            beta: b.param("bias", &[channels], Init::Zeros)?,
            running_mean: b.param("running_mean", &[channels], Init::Zeros)?,
            running_var: b.param("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self.gamma.broadcast_div(&(&self.running_var + self.eps)?.sqrt()?)?;
        let shift = (&self.beta - self.running_mean.mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape((1, (), 1, 1))?)?.broadcast_add(&shift.reshape((1, (), 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(super::pointwise::leaky_relu_op(x, LEAKY_SLOPE)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable softmax along `dim`, built from differentiable
/// primitives.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Nearest-neighbour ×2 upsampling of `(b, c, h, w)`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    Ok(super::pointwise::nearest2x_op(x)?)
}

/// Global average pool `(b, c, h, w) -> (b, c)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}
