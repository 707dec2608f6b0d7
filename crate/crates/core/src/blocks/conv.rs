use candle_core::{Result, Tensor};

use crate::params::{Init, ParamBuilder};

/// Square-kernel 2-D convolution with "same"-style padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> crate::Result<Self> {
        assert!(kernel % 2 == 1, "conv kernels are odd");
        assert!(stride == 1 || stride == 2, "conv stride is 1 or 2");
        let fan_in = c_in * kernel * kernel;
        let weight = pb.tensor(
            "weight",
            &[c_out, c_in, kernel, kernel],
            Init::Kaiming { fan_in, gain: 1.0 },
        )?;
        let bias = if bias {
            Some(pb.tensor("bias", &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize) -> Self {
        let k = weight.dims()[2];
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    /// Copy whose parameters are cut from the autodiff graph.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            ..*self
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.weight)
    }

    /// Convolves with a substitute weight (e.g. spectrally normalized) while
    /// keeping this layer's bias, stride and padding.
    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer on `(B, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> crate::Result<Self> {
        Self::with_bias_init(pb, d_in, d_out, 0.0)
    }

    pub fn with_bias_init(
        pb: &ParamBuilder,
        d_in: usize,
        d_out: usize,
        bias_init: f64,
    ) -> crate::Result<Self> {
        let weight = pb.tensor(
            "weight",
            &[d_out, d_in],
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        )?;
        let bias = pb.tensor("bias", &[d_out], Init::Const(bias_init))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}
