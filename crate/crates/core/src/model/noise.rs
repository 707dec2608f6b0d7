//! Conditional stochastic variation: per-scale normal distributions predicted
//! from encoder (and previous decoder) features, sampled with the
//! reparameterization `mu + sigma * eps`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocks::{softplus, Conv2d, Linear};
use crate::params::ParamBuilder;
use crate::Result;

/// Floor added after the softplus so sigma stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per-sample `(mu, sigma)` for one scale; both are `(B,)` tensors.
#[derive(Debug, Clone)]
pub struct NoiseDist {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Head producing `(mu, sigma)` for one decoder step. The convolution over
/// `Concat[F_E, F_D]` is split into the encoder part (owned by the encoder,
/// whose spatial means arrive as `enc_raw`) and the decoder part owned here;
/// a linear layer on the pooled 2-vector follows.
#[derive(Debug, Clone)]
pub struct NoiseHead {
    decoder_cond: Option<Conv2d>,
    fc: Linear,
}

impl NoiseHead {
    /// `d_channels` is `None` for the first step, where the previous decoder
    /// features are the encoder features themselves.
    pub fn new(pb: &ParamBuilder, d_channels: Option<usize>) -> Result<Self> {
        let decoder_cond = d_channels
            .map(|c| Conv2d::new(&pb.pp("dec_cond"), c, 2, 3, 1, false))
            .transpose()?;
        Ok(Self {
            decoder_cond,
            fc: Linear::new(&pb.pp("fc"), 2, 2)?,
        })
    }

    pub fn distribution(&self, enc_raw: &Tensor, d_prev: Option<&Tensor>) -> Result<NoiseDist> {
        let raw = match (&self.decoder_cond, d_prev) {
            (Some(conv), Some(d)) => (enc_raw + conv.forward(d)?.mean((2, 3))?)?,
            _ => enc_raw.clone(),
        };
        let out = self.fc.forward(&raw)?;
        let mu = out.narrow(1, 0, 1)?.squeeze(1)?;
        let sigma = (softplus(&out.narrow(1, 1, 1)?.squeeze(1)?)? + SIGMA_FLOOR)?;
        Ok(NoiseDist { mu, sigma })
    }
}

/// `(B, 1, H, W)` i.i.d. standard-normal draws from `rng`.
pub fn standard_normal(
    rng: &mut impl Rng,
    shape: (usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (b, h, w) = shape;
    let eps: Vec<f64> = (0..b * h * w).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(eps, (b, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Reparameterized sample `mu + sigma * eps`, one scalar pair per sample
/// broadcast over the `H×W` draw.
pub fn sample_noise(dist: &NoiseDist, eps: &Tensor) -> Result<Tensor> {
    let b = dist.mu.dim(0)?;
    let mu = dist.mu.reshape((b, 1, 1, 1))?;
    let sigma = dist.sigma.reshape((b, 1, 1, 1))?;
    Ok(eps.broadcast_mul(&sigma)?.broadcast_add(&mu)?)
}
