use candle_core::{Result, Tensor};
use super::{sigmoid, Linear};
use crate::params::ParamBuilder;

/// Squeeze-and-excitation style channel gate.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Linear,
    excite: Linear,
}

impl ChannelAttention {
    /// Hidden width is `channels / reduction`, at least 1.
    pub fn new(pb: &ParamBuilder, channels: usize, reduction: usize) -> crate::Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Linear::new(&pb.pp("squeeze"), channels, hidden)?,
            excite: Linear::new(&pb.pp("excite"), hidden, channels)?,
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `(B, C)`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        let hidden = self.squeeze.forward(&pooled)?.relu()?;
        sigmoid(&self.excite.forward(&hidden)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        x.broadcast_mul(&self.gate(x)?.reshape((b, c, 1, 1))?)
    }
}
