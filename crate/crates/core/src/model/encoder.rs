use candle_core::Tensor;

use super::ModelConfig;
use crate::blocks::{Conv2d, EncoderBlock};
use crate::params::ParamBuilder;
use crate::Result;

/// Stack of downsampling residual blocks plus, for variants with
/// conditional noise, one 2-channel distribution head per level.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
    heads: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut c_in = cfg.image_channels + 1;
        for k in 0..cfg.n_levels() {
            let c_out = cfg.level_width(k);
            blocks.push(EncoderBlock::new(
                &pb.pp(format!("block{k}")),
                c_in,
                c_out,
                cfg.ca_reduction,
            )?);
            if cfg.variant.conditional_noise() {
                heads.push(Conv2d::new(
                    &pb.pp(format!("noise_head{k}")),
                    c_out,
                    2,
                    3,
                    1,
                    true,
                )?);
            }
            c_in = c_out;
        }
        Ok(Self { blocks, heads })
    }

    /// Returns the pyramid (finest first) and, per level, the spatial mean of
    /// the distribution head as a `(B, 2)` tensor of raw `(mu, sigma)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for blk in &self.blocks {
            cur = blk.forward(&cur)?;
            levels.push(cur.clone());
        }
        let heads = self
            .heads
            .iter()
            .zip(&levels)
            .map(|(h, f)| Ok(h.forward(f)?.mean((2, 3))?))
            .collect::<Result<Vec<_>>>()?;
        Ok((levels, heads))
    }
}
