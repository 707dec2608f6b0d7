//! Image inpainting guided by a pre-trained generative memory.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: image and mask containers, PNG/JPEG I/O, mask synthesis,
//!   masking and compositing.
//! * [`blocks`]: differentiable building blocks (instance norm, channel
//!   attention, residual encoder/decoder blocks, modulated convolution,
//!   spectral normalization, bilinear upsampling).
//! * [`model`]: encoder, generative memory, conditional noise, latent
//!   embedding pool and the full inference loop.
//! * [`losses`]: reconstruction, perceptual, adversarial and KL objectives.
//! * [`metrics`]: PSNR, SSIM, NCC and LMSE plus directory evaluation.
//! * [`training`]: memory pre-training and inpainting training.
//! * [`checkpoint`]: the versioned `GMSRM1` parameter container.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{ImageTensor, Mask, MaskKind, MaskSpec};
pub use model::{GmSrm, ModelConfig, Variant};
