use candle_core::Tensor;

use crate::blocks::{leaky_relu, Conv2d, Linear};
use crate::params::ParamBuilder;
use crate::Result;

/// Non-linear mapping from a feature map to a latent embedding:
/// conv, LeakyReLU, global average pool, fully connected.
#[derive(Debug, Clone)]
pub struct EmbeddingMap {
    conv: Conv2d,
    fc: Linear,
}

impl EmbeddingMap {
    pub fn new(pb: &ParamBuilder, c_in: usize, hidden: usize, d_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), c_in, hidden, 3, 1, true)?,
            fc: Linear::new(&pb.pp("fc"), hidden, d_c)?,
        })
    }

    /// `(B, C, H, W)` to `(B, d_c)`, independent of `H, W`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv.forward(f)?, 0.2)?;
        Ok(self.fc.forward(&h.mean((2, 3))?)?)
    }
}

/// One step of the embedding pool: `c_i = f_c(F_D^{i-1}) + c_{i-1}`.
pub fn update_embedding(map: &EmbeddingMap, c_prev: &Tensor, d_prev: &Tensor) -> Result<Tensor> {
    Ok((map.forward(d_prev)? + c_prev)?)
}
