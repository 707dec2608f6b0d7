//! Differentiable building blocks shared by the encoder, memory, decoder and
//! discriminator. All tensors are `(B, C, H, W)`.

mod attention;
mod conv;
mod modulated;
mod norm;
mod resample;
mod residual;
mod spectral;

pub use attention::ChannelAttention;
pub use conv::{Conv2d, Linear};
pub use modulated::ModulatedConv;
pub use norm::{instance_norm, InstanceNorm};
pub use resample::{bilinear_upsample, interpolation_matrix};
pub use residual::{DecoderBlock, EncoderBlock};
pub use spectral::{spectral_normalize, SpectralState};

/// Epsilon inside the instance-norm square root.
pub const IN_EPS: f64 = 1e-5;
/// Epsilon inside the demodulation square root.
pub const DEMOD_EPS: f64 = 1e-8;
/// Lower bound on the estimated spectral norm.
pub const SN_EPS: f64 = 1e-12;

use candle_core::{Result, Tensor};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope * x) for slope in (0, 1)
    x.maximum(&(x * slope)?)
}

/// `ln(1 + e^x)`, computed stably for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    relu + tail
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + e^-x)
    x.neg()?.exp()?.affine(1.0, 1.0)?.recip()
}
