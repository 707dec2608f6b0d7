use candle_core::{Result, Tensor};

use super::{bilinear_upsample, ChannelAttention, Conv2d, InstanceNorm};
use crate::params::ParamBuilder;

/// Downsampling residual block:
/// `F^e = ReLU(IN(Conv_s2(x)))`, `out = F^e + CA(ReLU(IN(Conv(F^e))))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    down: Conv2d,
    down_norm: InstanceNorm,
    refine: Conv2d,
    refine_norm: InstanceNorm,
    attention: ChannelAttention,
}

impl EncoderBlock {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        ca_reduction: usize,
    ) -> crate::Result<Self> {
        Ok(Self {
            down: Conv2d::new(&pb.pp("down"), c_in, c_out, 3, 2, true)?,
            down_norm: InstanceNorm::new(&pb.pp("down_norm"), c_out)?,
            refine: Conv2d::new(&pb.pp("refine"), c_out, c_out, 3, 1, true)?,
            refine_norm: InstanceNorm::new(&pb.pp("refine_norm"), c_out)?,
            attention: ChannelAttention::new(&pb.pp("ca"), c_out, ca_reduction)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fe = self.down_norm.forward(&self.down.forward(x)?)?.relu()?;
        let branch = self.refine_norm.forward(&self.refine.forward(&fe)?)?.relu()?;
        fe + self.attention.forward(&branch)?
    }
}

/// Upsampling residual block over concatenated inputs:
/// `F^d = ReLU(IN(Conv(up2(Concat[..]))))`, `out = F^d + CA(ReLU(IN(Conv(F^d))))`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    in_channels: usize,
    fuse: Conv2d,
    fuse_norm: InstanceNorm,
    refine: Conv2d,
    refine_norm: InstanceNorm,
    attention: ChannelAttention,
}

impl DecoderBlock {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        ca_reduction: usize,
    ) -> crate::Result<Self> {
        Ok(Self {
            in_channels: c_in,
            fuse: Conv2d::new(&pb.pp("fuse"), c_in, c_out, 3, 1, true)?,
            fuse_norm: InstanceNorm::new(&pb.pp("fuse_norm"), c_out)?,
            refine: Conv2d::new(&pb.pp("refine"), c_out, c_out, 3, 1, true)?,
            refine_norm: InstanceNorm::new(&pb.pp("refine_norm"), c_out)?,
            attention: ChannelAttention::new(&pb.pp("ca"), c_out, ca_reduction)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// `inputs` are concatenated along channels in the given order
    /// (memory features, encoder features, previous decoder features) and
    /// must share a spatial size. The output has twice that size.
    pub fn forward(&self, inputs: &[&Tensor]) -> crate::Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| crate::error::invalid!("decoder block needs inputs"))?;
        let (b, _, h, w) = first.dims4()?;
        let mut channels = 0;
        for t in inputs {
            let (tb, tc, th, tw) = t.dims4()?;
            if (tb, th, tw) != (b, h, w) {
                return Err(crate::error::invalid!(
                    "decoder inputs disagree in batch/spatial size: {:?} vs {:?}",
                    first.dims(),
                    t.dims()
                ));
            }
            channels += tc;
        }
        if channels != self.in_channels {
            return Err(crate::error::invalid!(
                "decoder block expects {} input channels, got {channels}",
                self.in_channels
            ));
        }
        let x = Tensor::cat(inputs, 1)?;
        let x = bilinear_upsample(&x, 2)?;
        let fd = self.fuse_norm.forward(&self.fuse.forward(&x)?)?.relu()?;
        let branch = self.refine_norm.forward(&self.refine.forward(&fd)?)?.relu()?;
        Ok((fd + self.attention.forward(&branch)?)?)
    }
}
