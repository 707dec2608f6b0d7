use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::embedding::{update_embedding, EmbeddingMap};
use super::encoder::Encoder;
use super::memory::Memory;
use super::noise::{sample_noise, standard_normal, NoiseDist, NoiseHead};
use super::{ModelConfig, Variant};
use crate::blocks::{Conv2d, DecoderBlock};
use crate::error::{invalid, Error, Result};
use crate::imaging::{apply_mask, images_to_tensor, masks_to_tensor, tensor_to_images, ImageTensor, Mask};
use crate::params::{ParamBuilder, ParamStore};

/// Prefix under which the (frozen) memory parameters live.
pub const MEMORY_PREFIX: &str = "memory.";

/// Counts of the structural events of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub memory_queries: usize,
    pub embedding_updates: usize,
    pub decoder_blocks: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, C, S, S)` in `[-1, 1]`.
    pub image: Tensor,
    /// One distribution per decoder step for variants with conditional noise.
    pub dists: Vec<NoiseDist>,
    pub trace: ForwardTrace,
}

/// The inpainting network: encoder, embedding pool, conditional noise,
/// frozen generative memory and decoder.
#[derive(Debug, Clone)]
pub struct GmSrm {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    embed_init: Option<EmbeddingMap>,
    embed_updates: Vec<EmbeddingMap>,
    noise_heads: Vec<NoiseHead>,
    bridges: Vec<Conv2d>,
    memory: Option<Memory>,
    decoder: Vec<DecoderBlock>,
    out_conv: Conv2d,
    memory_ready: bool,
    allow_untrained: bool,
}

impl GmSrm {
    /// Single-precision CPU model with seeded initialization.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let pb = ParamBuilder::new(dtype, device, seed);
        let n = cfg.n_levels();
        let variant = cfg.variant;
        let encoder = Encoder::new(&pb.pp("encoder"), cfg)?;

        let (mut embed_init, mut embed_updates, mut noise_heads, mut bridges) =
            (None, Vec::new(), Vec::new(), Vec::new());
        let mut memory = None;
        if variant.uses_memory() {
            let coarsest = cfg.level_width(cfg.level_of_step(0));
            embed_init = Some(EmbeddingMap::new(
                &pb.pp("embed.init"),
                coarsest,
                cfg.embed_hidden,
                cfg.d_c,
            )?);
            for j in 0..n {
                let width = cfg.level_width(cfg.level_of_step(j));
                if variant.progressive() {
                    embed_updates.push(EmbeddingMap::new(
                        &pb.pp(format!("embed.update{j}")),
                        width,
                        cfg.embed_hidden,
                        cfg.d_c,
                    )?);
                }
                if variant.conditional_noise() {
                    let d_channels = (j > 0).then_some(width);
                    noise_heads.push(NoiseHead::new(&pb.pp(format!("noise.{j}")), d_channels)?);
                }
                bridges.push(Conv2d::new(&pb.pp(format!("bridge.{j}")), width, width, 3, 1, true)?);
            }
            memory = Some(Memory::new(&pb.pp("memory").frozen(), cfg)?);
        }

        let mut decoder = Vec::with_capacity(n);
        for j in 0..n {
            let width = cfg.level_width(cfg.level_of_step(j));
            let c_in = if variant.uses_memory() { 3 * width } else { 2 * width };
            decoder.push(DecoderBlock::new(
                &pb.pp(format!("decoder.block{j}")),
                c_in,
                cfg.decoder_out_width(j),
                cfg.ca_reduction,
            )?);
        }
        let out_conv = Conv2d::new(&pb.pp("out_conv"), cfg.base_channels, cfg.image_channels, 3, 1, true)?;

        Ok(Self {
            cfg: cfg.clone(),
            store: pb.store(),
            encoder,
            embed_init,
            embed_updates,
            noise_heads,
            bridges,
            memory,
            decoder,
            out_conv,
            memory_ready: false,
            allow_untrained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Installs pre-trained memory weights from a tensor map (names carry
    /// the `memory.` prefix).
    pub fn load_memory(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if self.memory.is_none() {
            return Err(Error::Config(format!(
                "variant {} has no generative memory",
                self.cfg.variant
            )));
        }
        self.store
            .load_prefix(tensors, MEMORY_PREFIX)
            .map_err(|e| Error::Config(format!("incompatible memory checkpoint: {e}")))?;
        self.memory_ready = true;
        Ok(())
    }

    /// Marks the memory as usable after its weights were restored together
    /// with the rest of the model.
    pub fn mark_memory_ready(&mut self) {
        self.memory_ready = true;
    }

    /// Lets tests run with randomly initialized memory.
    pub fn allow_untrained_memory(&mut self) {
        self.allow_untrained = true;
    }

    pub fn memory_ready(&self) -> bool {
        !self.cfg.variant.uses_memory() || self.memory_ready || self.allow_untrained
    }

    pub fn memory(&self) -> Option<&Memory> {
        self.memory.as_ref()
    }

    pub fn embed_init(&self) -> Option<&EmbeddingMap> {
        self.embed_init.as_ref()
    }

    pub fn embed_update(&self, j: usize) -> Option<&EmbeddingMap> {
        self.embed_updates.get(j)
    }

    pub fn noise_head(&self, j: usize) -> Option<&NoiseHead> {
        self.noise_heads.get(j)
    }

    pub fn bridge(&self, j: usize) -> Option<&Conv2d> {
        self.bridges.get(j)
    }

    fn check_input(&self, img_in: &Tensor, mask: &Tensor) -> Result<()> {
        let (b, c, h, w) = img_in.dims4()?;
        let s = self.cfg.image_side;
        if (c, h, w) != (self.cfg.image_channels, s, s) {
            return Err(invalid!(
                "input {:?} does not match the configured {}x{s}x{s}",
                img_in.dims(),
                self.cfg.image_channels
            ));
        }
        if mask.dims4()? != (b, 1, h, w) {
            return Err(invalid!("mask {:?} does not match input {:?}", mask.dims(), img_in.dims()));
        }
        Ok(())
    }

    /// Encodes `Concat[img_in, mask]`: the pyramid (finest first) and the
    /// per-level raw distribution heads (empty without conditional noise).
    pub fn encode(&self, img_in: &Tensor, mask: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.check_input(img_in, mask)?;
        self.encoder.forward(&Tensor::cat(&[img_in, mask], 1)?)
    }

    /// One memory query: projects the encoder features into the memory's
    /// input space and runs memory block `j`.
    pub fn memory_reason(
        &self,
        j: usize,
        c: &Tensor,
        f_e: &Tensor,
        prev: Option<&Tensor>,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let memory = self
            .memory
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no memory", self.cfg.variant)))?;
        if !self.memory_ready() {
            return Err(Error::Config(
                "generative memory is untrained; load a pre-trained memory checkpoint".into(),
            ));
        }
        let enc = self.bridges[j].forward(f_e)?;
        memory.query(j, c, &enc, prev, noise)
    }

    /// Full inference loop on a batch. `img_in` must already be masked;
    /// `mask` is `(B, 1, S, S)` with 1 = known.
    pub fn forward(&self, img_in: &Tensor, mask: &Tensor, rng: &mut impl Rng) -> Result<ForwardOutput> {
        if !self.memory_ready() {
            return Err(Error::Config(
                "generative memory is untrained; load a pre-trained memory checkpoint".into(),
            ));
        }
        let (levels, enc_heads) = self.encode(img_in, mask)?;
        let variant = self.cfg.variant;
        let n = self.cfg.n_levels();
        let coarsest = &levels[n - 1];

        let mut trace = ForwardTrace::default();
        let mut dists = Vec::new();
        let mut d_prev = coarsest.clone();
        let mut c = match &self.embed_init {
            Some(map) => Some(map.forward(coarsest)?),
            None => None,
        };
        let mut mem_prev: Option<Tensor> = None;

        for j in 0..n {
            let k = self.cfg.level_of_step(j);
            let f_e = &levels[k];
            let next = match c.as_mut() {
                Some(c) => {
                    if variant.progressive() {
                        *c = update_embedding(&self.embed_updates[j], c, &d_prev)?;
                        trace.embedding_updates += 1;
                    }
                    let (b, _, h, w) = f_e.dims4()?;
                    let eps = standard_normal(rng, (b, h, w), f_e.dtype(), f_e.device())?;
                    let noise = if variant.conditional_noise() {
                        let cond = (j > 0).then_some(&d_prev);
                        let dist = self.noise_heads[j].distribution(&enc_heads[k], cond)?;
                        let noise = sample_noise(&dist, &eps)?;
                        dists.push(dist);
                        noise
                    } else {
                        eps
                    };
                    let f_m = self.memory_reason(j, c, f_e, mem_prev.as_ref(), &noise)?;
                    trace.memory_queries += 1;
                    let out = self.decoder[j].forward(&[&f_m, f_e, &d_prev])?;
                    mem_prev = Some(f_m);
                    out
                }
                None => self.decoder[j].forward(&[f_e, &d_prev])?,
            };
            trace.decoder_blocks += 1;
            d_prev = next;
        }
        let image = self.out_conv.forward(&d_prev)?.tanh()?;
        Ok(ForwardOutput { image, dists, trace })
    }

    /// Masks `img`, runs the network and returns its raw output image.
    pub fn infer(&self, img: &ImageTensor, m: &Mask, rng: &mut impl Rng) -> Result<ImageTensor> {
        let masked = apply_mask(img, m)?;
        let x = images_to_tensor(&[&masked], self.dtype(), self.device())?;
        let mt = masks_to_tensor(&[m], self.dtype(), self.device())?;
        let out = self.forward(&x, &mt, rng)?;
        Ok(tensor_to_images(&out.image)?.remove(0))
    }
}

/// Assembles the network for `cfg.variant`.
pub fn build_variant(cfg: &ModelConfig, seed: u64) -> Result<GmSrm> {
    GmSrm::new(cfg, seed)
}
