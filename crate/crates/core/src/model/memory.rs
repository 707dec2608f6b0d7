//! The generative memory: a StyleGAN2-style synthesis stack whose blocks are
//! steered by a latent embedding through modulated, demodulated convolutions.

use candle_core::Tensor;

use super::ModelConfig;
use crate::blocks::{bilinear_upsample, leaky_relu, Linear, ModulatedConv};
use crate::params::{Init, ParamBuilder};
use crate::Result;

/// Initial per-channel noise scale.
const NOISE_STRENGTH_INIT: f64 = 0.1;

/// One synthesis block at a single resolution.
#[derive(Debug, Clone)]
pub struct MemoryBlock {
    affine: Linear,
    conv: ModulatedConv,
    noise_strength: Tensor,
    bias: Tensor,
}

impl MemoryBlock {
    fn new(pb: &ParamBuilder, d_c: usize, c_prev: usize, c_enc: usize, c_out: usize) -> Result<Self> {
        let c_in = c_prev + c_enc;
        Ok(Self {
            affine: Linear::with_bias_init(&pb.pp("affine"), d_c, c_in, 1.0)?,
            conv: ModulatedConv::new(&pb.pp("conv"), c_in, c_out, 3, true)?,
            noise_strength: pb.tensor("noise_strength", &[c_out], Init::Const(NOISE_STRENGTH_INIT))?,
            bias: pb.tensor("bias", &[c_out], Init::Zeros)?,
        })
    }

    /// Style vector `(B, C_in)` for embedding `c`.
    pub fn style(&self, c: &Tensor) -> Result<Tensor> {
        Ok(self.affine.forward(c)?)
    }

    /// `prev`: upsampled previous memory features (or the constant input),
    /// `enc`: encoder-derived features, `noise`: `(B, 1, H, W)`.
    pub fn forward(&self, c: &Tensor, prev: &Tensor, enc: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[prev, enc], 1)?;
        let y = self.conv.forward(&x, &self.style(c)?)?;
        let n = noise.broadcast_mul(&self.noise_strength.reshape((1, (), 1, 1))?)?;
        let y = (y + n)?.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?;
        Ok(leaky_relu(&y, 0.2)?)
    }
}

/// Constant input plus one block per decoder step (coarse to fine).
#[derive(Debug, Clone)]
pub struct Memory {
    const_input: Tensor,
    blocks: Vec<MemoryBlock>,
}

impl Memory {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.n_levels();
        let coarsest = cfg.level_of_step(0);
        let c0 = cfg.level_width(coarsest);
        let s0 = cfg.level_side(coarsest);
        let const_input = pb.tensor("const", &[1, c0, s0, s0], Init::Normal(1.0))?;
        let mut blocks = Vec::with_capacity(n);
        let mut c_prev = c0;
        for j in 0..n {
            let k = cfg.level_of_step(j);
            let width = cfg.level_width(k);
            blocks.push(MemoryBlock::new(&pb.pp(format!("block{j}")), cfg.d_c, c_prev, width, width)?);
            c_prev = width;
        }
        Ok(Self { const_input, blocks })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, j: usize) -> &MemoryBlock {
        &self.blocks[j]
    }

    /// Queries block `j`. `prev` is the previous block's output (ignored for
    /// `j == 0`, which starts from the learned constant).
    pub fn query(
        &self,
        j: usize,
        c: &Tensor,
        enc: &Tensor,
        prev: Option<&Tensor>,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let b = enc.dim(0)?;
        let up = match (j, prev) {
            (0, _) | (_, None) => {
                let d = self.const_input.dims().to_vec();
                self.const_input.broadcast_as((b, d[1], d[2], d[3]))?.contiguous()?
            }
            (_, Some(p)) => bilinear_upsample(p, 2)?,
        };
        self.blocks[j].forward(c, &up, enc, noise)
    }
}

/// Latent mapping used only while pre-training the memory as a plain
/// generator; inpainting replaces it with the embedding maps.
#[derive(Debug, Clone)]
pub struct MappingNetwork {
    layers: Vec<Linear>,
}

impl MappingNetwork {
    pub fn new(pb: &ParamBuilder, d_c: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Linear::new(&pb.pp(format!("fc{i}")), d_c, d_c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        // Pixel norm on the input latent.
        let norm = (z.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
        let mut x = z.broadcast_div(&norm)?;
        for l in &self.layers {
            x = leaky_relu(&l.forward(&x)?, 0.2)?;
        }
        Ok(x)
    }
}

/// Memory wrapped as an image generator for adversarial pre-training:
/// mapping network, memory blocks fed with zero encoder features, and
/// skip-connected to-RGB heads.
#[derive(Debug, Clone)]
pub struct MemoryGenerator {
    cfg: ModelConfig,
    mapping: MappingNetwork,
    memory: Memory,
    to_rgb: Vec<(Linear, ModulatedConv, Tensor)>,
}

impl MemoryGenerator {
    pub const MAPPING_DEPTH: usize = 2;

    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mapping = MappingNetwork::new(&pb.pp("mapping"), cfg.d_c, Self::MAPPING_DEPTH)?;
        let memory = Memory::new(&pb.pp("memory"), cfg)?;
        let mut to_rgb = Vec::new();
        for j in 0..cfg.n_levels() {
            let width = cfg.level_width(cfg.level_of_step(j));
            let p = pb.pp(format!("to_rgb.{j}"));
            to_rgb.push((
                Linear::with_bias_init(&p.pp("affine"), cfg.d_c, width, 1.0)?,
                ModulatedConv::new(&p.pp("conv"), width, cfg.image_channels, 1, false)?,
                p.tensor("bias", &[cfg.image_channels], Init::Zeros)?,
            ));
        }
        Ok(Self {
            cfg: cfg.clone(),
            mapping,
            memory,
            to_rgb,
        })
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// Synthesizes `(B, C, S, S)` images in `[-1, 1]` from latents `(B, d_c)`
    /// and per-step noise maps.
    pub fn generate(&self, z: &Tensor, noises: &[Tensor]) -> Result<Tensor> {
        let b = z.dim(0)?;
        let c = self.mapping.forward(z)?;
        let mut prev: Option<Tensor> = None;
        let mut rgb: Option<Tensor> = None;
        for j in 0..self.memory.n_blocks() {
            let k = self.cfg.level_of_step(j);
            let side = self.cfg.level_side(k);
            let enc = Tensor::zeros(
                (b, self.cfg.level_width(k), side, side),
                z.dtype(),
                z.device(),
            )?;
            let f = self.memory.query(j, &c, &enc, prev.as_ref(), &noises[j])?;
            let (affine, conv, bias) = &self.to_rgb[j];
            let y = conv
                .forward(&f, &affine.forward(&c)?)?
                .broadcast_add(&bias.reshape((1, (), 1, 1))?)?;
            rgb = Some(match rgb {
                None => y,
                Some(r) => (bilinear_upsample(&r, 2)? + y)?,
            });
            prev = Some(f);
        }
        let rgb = rgb.expect("memory has at least one block");
        Ok(bilinear_upsample(&rgb, 2)?.tanh()?)
    }
}
