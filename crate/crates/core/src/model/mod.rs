//! The inpainting network and its pieces.

mod config;
mod embedding;
mod encoder;
mod gmsrm;
mod memory;
mod noise;

pub use config::{ModelConfig, Variant};
pub use embedding::{update_embedding, EmbeddingMap};
pub use encoder::Encoder;
pub use gmsrm::{build_variant, ForwardOutput, ForwardTrace, GmSrm, MEMORY_PREFIX};
pub use memory::{MappingNetwork, Memory, MemoryBlock, MemoryGenerator};
pub use noise::{sample_noise, standard_normal, NoiseDist, NoiseHead, SIGMA_FLOOR};
