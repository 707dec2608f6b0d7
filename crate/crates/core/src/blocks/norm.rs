use candle_core::{Result, Tensor};

use crate::params::{Init, ParamBuilder};

/// Per-sample, per-channel standardization over the spatial dims.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

/// Instance normalization with a learned per-channel affine
/// (scale starts at 1, shift at 0).
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    scale: Tensor,
    shift: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> crate::Result<Self> {
        Ok(Self {
            scale: pb.tensor("scale", &[channels], Init::Const(1.0))?,
            shift: pb.tensor("shift", &[channels], Init::Zeros)?,
            eps: super::IN_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        instance_norm(x, self.eps)?
            .broadcast_mul(&self.scale.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.shift.reshape((1, (), 1, 1))?)
    }
}
