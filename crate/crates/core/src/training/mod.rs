//! Two-stage training: adversarial pre-training of the generative memory on
//! intact images, then inpainting training with the memory frozen.

mod adam;
mod data;

pub use adam::Adam;
pub use data::{Augment, Dataset, MaskMix};
pub use crate::model::build_variant;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::softplus;
use crate::checkpoint::{Container, RngState};
use crate::error::{invalid, Error, Result};
use crate::imaging::{apply_mask, images_to_tensor, masks_to_tensor};
use crate::losses::{
    adversarial_generator_loss, discriminator_loss, kl_loss, perceptual_loss, reconstruction_loss, total_loss,
    ConvFeatureExtractor, Discriminator, FeatureExtractor, LossParts, LossWeights, SnMode,
};
use crate::model::{standard_normal, GmSrm, MemoryGenerator, ModelConfig, MEMORY_PREFIX};
use crate::params::{ParamBuilder, ParamStore};

pub const DISC_PREFIX: &str = "disc";
pub const KIND_MEMORY: &str = "memory";
pub const KIND_INPAINTING: &str = "inpainting";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Width of the first discriminator layer.
    pub disc_channels: usize,
    /// `None` uses the defaults for `model.n_scales`.
    pub loss: Option<LossWeights>,
    pub augment: Augment,
    pub masks: MaskMix,
    /// Checkpoint period in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            disc_channels: 32,
            loss: None,
            augment: Augment::default(),
            masks: MaskMix::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.disc_channels == 0 {
            return Err(Error::Config("disc_channels must be at least 1".into()));
        }
        if self.augment.resize_ratio < 1.0 {
            return Err(Error::Config("augment.resize_ratio must be >= 1".into()));
        }
        self.masks.validate().map_err(|e| Error::Config(e.to_string()))?;
        let lw = self.loss_weights();
        lw.validate().map_err(|e| Error::Config(e.to_string()))?;
        if lw.scale_weights.len() != self.model.n_levels() {
            return Err(Error::Config(format!(
                "{} KL scale weights for {} decoder scales",
                lw.scale_weights.len(),
                self.model.n_levels()
            )));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.clone().unwrap_or_else(|| LossWeights::new(self.model.n_scales))
    }
}

/// One line of the inpainting training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_rec: f64,
    pub l_perc: f64,
    pub l_adv: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub l_disc: f64,
}

/// One line of the memory pre-training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: u64,
    pub l_gen: f64,
    pub l_disc: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(step: u64, values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            let detail = values.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
            return Err(Error::NonFinite { step, detail: format!("{name} is {v} ({detail})") });
        }
    }
    Ok(())
}

/// Largest absolute gradient over the frozen parameters of `store`.
pub fn max_frozen_grad(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut worst = 0.0f64;
    for (_, var) in store.frozen() {
        if let Some(g) = grads.get(var.as_tensor()) {
            worst = worst.max(scalar(&g.abs()?.max_all()?)?);
        }
    }
    Ok(worst)
}

fn build_discriminator(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Discriminator> {
    let pb = ParamBuilder::new(dtype, device, cfg.seed ^ 0xd15c);
    Discriminator::new(&pb.pp(DISC_PREFIX), cfg.model.image_channels, cfg.disc_channels)
}

fn restore_store(store: &ParamStore, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
    store
        .load_prefix(tensors, prefix)
        .map_err(|e| Error::Config(format!("incompatible checkpoint: {e}")))?;
    Ok(())
}

fn header(kind: &str, cfg: &TrainConfig, step: u64, rng: &ChaCha8Rng, opts: [(&str, u64); 2]) -> Result<crate::checkpoint::Header> {
    let mut h = Container::header(kind);
    h.model_config = Some(serde_json::to_value(&cfg.model)?);
    h.step = step;
    h.seed = cfg.seed;
    h.rng = Some(RngState::capture(rng));
    h.meta.insert("train_config".into(), serde_json::to_value(cfg)?);
    for (k, t) in opts {
        h.meta.insert(k.into(), t.into());
    }
    Ok(h)
}

fn meta_u64(c: &Container, key: &str) -> Result<u64> {
    c.header
        .meta
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("checkpoint lacks meta.{key}")))
}

/// Sink for per-step JSON log lines.
pub struct RunDir {
    root: PathBuf,
    log: fs::File,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>, log_name: &str) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ckpt = root.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let path = root.join(log_name);
        let log = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { root, log })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, line: &impl Serialize) -> Result<()> {
        let s = serde_json::to_string(line)?;
        writeln!(self.log, "{s}").map_err(|e| Error::io(&self.root, e))
    }

    /// `checkpoints/ckpt_<step>.gmsrm`, zero-padded so names sort by step.
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("ckpt_{step:08}.gmsrm"))
    }
}

/// Generator-side state of memory pre-training.
pub struct MemoryTrainer {
    cfg: TrainConfig,
    data: Dataset,
    store: ParamStore,
    generator: MemoryGenerator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl MemoryTrainer {
    pub fn new(cfg: &TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.len() < 2 {
            return Err(invalid!("memory pre-training needs at least 2 images, got {}", data.len()));
        }
        if data.side() != cfg.model.image_side {
            return Err(invalid!("dataset side {} differs from image_side {}", data.side(), cfg.model.image_side));
        }
        let pb = ParamBuilder::new(DType::F32, &Device::Cpu, cfg.seed);
        let generator = MemoryGenerator::new(&pb, &cfg.model)?;
        Ok(Self {
            store: pb.store(),
            generator,
            disc: build_discriminator(cfg, DType::F32, &Device::Cpu)?,
            opt_g: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2)?,
            opt_d: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            cfg: cfg.clone(),
            data,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &MemoryGenerator {
        &self.generator
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Samples `n` images from random latents.
    pub fn sample(&mut self, n: usize) -> Result<Tensor> {
        let (z, noises) = self.latents(n)?;
        self.generator.generate(&z, &noises)
    }

    fn latents(&mut self, n: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let m = &self.cfg.model;
        let dev = Device::Cpu;
        let z = standard_normal(&mut self.rng, (n, 1, m.d_c), DType::F32, &dev)?.reshape((n, m.d_c))?;
        let noises = (0..m.n_levels())
            .map(|j| {
                let s = m.level_side(m.level_of_step(j));
                standard_normal(&mut self.rng, (n, s, s), DType::F32, &dev)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((z, noises))
    }

    /// One discriminator update then one generator update with the
    /// non-saturating logistic loss.
    pub fn step(&mut self) -> Result<PretrainLog> {
        let b = self.cfg.batch_size;
        let real = self.data.sample(b, &self.cfg.augment, &mut self.rng)?;
        let real = images_to_tensor(&real.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
        let (z, noises) = self.latents(b)?;
        let fake = self.generator.generate(&z, &noises)?;

        let d_real = self.disc.forward(&real, SnMode::Train)?;
        let d_fake = self.disc.forward(&fake.detach(), SnMode::Train)?;
        let l_disc = (softplus(&d_fake)?.mean_all()? + softplus(&d_real.neg()?)?.mean_all()?)?;
        let grads = l_disc.backward()?;
        self.opt_d.step(&self.disc.store().trainable(), &grads)?;

        let l_gen = softplus(&self.disc.forward(&fake, SnMode::Frozen)?.neg()?)?.mean_all()?;
        let grads = l_gen.backward()?;
        self.opt_g.step(&self.store.trainable(), &grads)?;

        self.step += 1;
        let log = PretrainLog { step: self.step, l_gen: scalar(&l_gen)?, l_disc: scalar(&l_disc)? };
        ensure_finite(self.step, &[("l_gen", log.l_gen), ("l_disc", log.l_disc)])?;
        Ok(log)
    }

    /// Generator (mapping, memory, to-RGB), discriminator and optimizer
    /// state. Only the `memory.` tensors are consumed by the inpainting model.
    pub fn checkpoint(&self) -> Result<Container> {
        let mut tensors = self.store.tensors();
        tensors.extend(self.disc.store().tensors());
        tensors.extend(self.opt_g.state_tensors("opt.g."));
        tensors.extend(self.opt_d.state_tensors("opt.d."));
        let h = header(
            KIND_MEMORY,
            &self.cfg,
            self.step,
            &self.rng,
            [("opt_g_steps", self.opt_g.steps()), ("opt_d_steps", self.opt_d.steps())],
        )?;
        Container::new(h, &tensors)
    }
}

/// Pre-trains the memory for `cfg.steps` steps. With a run directory, the
/// log goes to `pretrain_log.jsonl` and checkpoints to `checkpoints/`.
pub fn pretrain_memory(data: Dataset, cfg: &TrainConfig, run: Option<&mut RunDir>) -> Result<Container> {
    let mut trainer = MemoryTrainer::new(cfg, data)?;
    let mut run = run;
    while trainer.step_count() < cfg.steps {
        let log = trainer.step()?;
        if log.step % 100 == 0 {
            log::info!("step {}: {}", log.step, serde_json::to_string(&log)?);
        }
        if let Some(r) = run.as_deref_mut() {
            r.log(&log)?;
            if cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 && log.step < cfg.steps {
                trainer.checkpoint()?.write(r.checkpoint_path(log.step))?;
            }
        }
    }
    let ckpt = trainer.checkpoint()?;
    if let Some(r) = run {
        ckpt.write(r.checkpoint_path(trainer.step_count()))?;
    }
    Ok(ckpt)
}

/// Memory tensors (`memory.*`) of a memory checkpoint, checked against
/// `model`.
pub fn memory_tensors(ckpt: &Container, model: &ModelConfig) -> Result<BTreeMap<String, Tensor>> {
    if ckpt.header.kind != KIND_MEMORY && ckpt.header.kind != KIND_INPAINTING {
        return Err(Error::Config(format!("{} checkpoint does not hold a memory", ckpt.header.kind)));
    }
    if let Some(v) = &ckpt.header.model_config {
        let theirs: ModelConfig = serde_json::from_value(v.clone())?;
        let same = theirs.n_scales == model.n_scales
            && theirs.d_c == model.d_c
            && theirs.image_side == model.image_side
            && theirs.base_channels == model.base_channels
            && theirs.max_channels == model.max_channels;
        if !same {
            return Err(Error::Config("memory checkpoint was trained with a different model configuration".into()));
        }
    }
    let all = ckpt.tensors(&Device::Cpu)?;
    Ok(all.into_iter().filter(|(k, _)| k.starts_with(MEMORY_PREFIX)).collect())
}

/// State of inpainting training.
pub struct InpaintTrainer {
    cfg: TrainConfig,
    lw: LossWeights,
    data: Dataset,
    model: GmSrm,
    disc: Discriminator,
    fx: Box<dyn FeatureExtractor>,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    max_memory_grad: f64,
}

impl InpaintTrainer {
    /// `memory` is required for every variant except `base`.
    pub fn new(cfg: &TrainConfig, data: Dataset, memory: Option<&Container>) -> Result<Self> {
        cfg.validate()?;
        if data.side() != cfg.model.image_side {
            return Err(invalid!("dataset side {} differs from image_side {}", data.side(), cfg.model.image_side));
        }
        let mut model = build_variant(&cfg.model, cfg.seed)?;
        match (cfg.model.variant.uses_memory(), memory) {
            (true, Some(c)) => model.load_memory(&memory_tensors(c, &cfg.model)?)?,
            (true, None) => {
                return Err(Error::Config(format!("variant {} needs a pre-trained memory", cfg.model.variant)))
            }
            (false, Some(_)) => log::warn!("variant base ignores the memory checkpoint"),
            (false, None) => {}
        }
        let fx = ConvFeatureExtractor::default_for(cfg.model.image_channels, DType::F32, &Device::Cpu)?;
        Ok(Self {
            lw: cfg.loss_weights(),
            disc: build_discriminator(cfg, DType::F32, &Device::Cpu)?,
            fx: Box::new(fx),
            opt_g: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2)?,
            opt_d: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            max_memory_grad: 0.0,
            cfg: cfg.clone(),
            data,
            model,
        })
    }

    /// Continues from an inpainting checkpoint written by [`Self::checkpoint`].
    pub fn resume(cfg: &TrainConfig, data: Dataset, ckpt: &Container) -> Result<Self> {
        if ckpt.header.kind != KIND_INPAINTING {
            return Err(Error::Config(format!("cannot resume from a {} checkpoint", ckpt.header.kind)));
        }
        let mut t = Self::new(cfg, data, cfg.model.variant.uses_memory().then_some(ckpt))?;
        let tensors = ckpt.tensors(&Device::Cpu)?;
        restore_store(t.model.store(), &tensors, "")
            .or_else(|_| restore_store(t.model.store(), &strip_disc(&tensors), ""))?;
        restore_store(t.disc.store(), &tensors, "")?;
        t.opt_g.load_state(meta_u64(ckpt, "opt_g_steps")?, &tensors, "opt.g.")?;
        t.opt_d.load_state(meta_u64(ckpt, "opt_d_steps")?, &tensors, "opt.d.")?;
        t.step = ckpt.header.step;
        if let Some(r) = &ckpt.header.rng {
            t.rng = r.restore();
        }
        Ok(t)
    }

    /// Replaces the perceptual feature extractor.
    pub fn set_feature_extractor(&mut self, fx: Box<dyn FeatureExtractor>) {
        self.fx = fx;
    }

    pub fn model(&self) -> &GmSrm {
        &self.model
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Largest |gradient| seen on any memory parameter so far.
    pub fn max_memory_grad(&self) -> f64 {
        self.max_memory_grad
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<StepLog> {
        let b = self.cfg.batch_size;
        let side = self.cfg.model.image_side;
        let gt = self.data.sample(b, &self.cfg.augment, &mut self.rng)?;
        let masks = (0..b).map(|_| self.cfg.masks.sample(side, &mut self.rng)).collect::<Result<Vec<_>>>()?;
        let inputs = gt.iter().zip(&masks).map(|(g, m)| apply_mask(g, m)).collect::<Result<Vec<_>>>()?;
        let (dtype, dev) = (self.model.dtype(), self.model.device().clone());
        let gt_t = images_to_tensor(&gt.iter().collect::<Vec<_>>(), dtype, &dev)?;
        let in_t = images_to_tensor(&inputs.iter().collect::<Vec<_>>(), dtype, &dev)?;
        let mask_t = masks_to_tensor(&masks.iter().collect::<Vec<_>>(), dtype, &dev)?;

        let out = self.model.forward(&in_t, &mask_t, &mut self.rng)?;
        let pred = &out.image;

        let l_disc = discriminator_loss(&self.disc.critic(SnMode::Train), pred, &gt_t)?;
        let grads = l_disc.backward()?;
        self.opt_d.step(&self.disc.store().trainable(), &grads)?;

        let parts = LossParts {
            rec: reconstruction_loss(pred, &gt_t, &mask_t, self.lw.gamma)?,
            perc: perceptual_loss(pred, &gt_t, self.fx.as_ref())?,
            adv: adversarial_generator_loss(&self.disc.critic(SnMode::Frozen), pred)?,
            kl: if out.dists.is_empty() {
                Tensor::zeros((), dtype, &dev)?
            } else {
                kl_loss(&out.dists, &self.lw.scale_weights)?
            },
        };
        let total = total_loss(&parts, &self.lw)?;
        let grads = total.backward()?;
        let mem_grad = max_frozen_grad(self.model.store(), &grads)?;
        self.max_memory_grad = self.max_memory_grad.max(mem_grad);
        if mem_grad != 0.0 {
            return Err(Error::Config(format!("frozen memory received a gradient of {mem_grad}")));
        }

        self.step += 1;
        let log = StepLog {
            step: self.step,
            l_rec: scalar(&parts.rec)?,
            l_perc: scalar(&parts.perc)?,
            l_adv: scalar(&parts.adv)?,
            l_kl: scalar(&parts.kl)?,
            l_total: scalar(&total)?,
            l_disc: scalar(&l_disc)?,
        };
        ensure_finite(
            self.step,
            &[
                ("l_rec", log.l_rec),
                ("l_perc", log.l_perc),
                ("l_adv", log.l_adv),
                ("l_kl", log.l_kl),
                ("l_total", log.l_total),
                ("l_disc", log.l_disc),
            ],
        )?;
        self.opt_g.step(&self.model.store().trainable(), &grads)?;
        Ok(log)
    }

    pub fn checkpoint(&self) -> Result<Container> {
        let mut tensors = self.model.store().tensors();
        tensors.extend(self.disc.store().tensors());
        tensors.extend(self.opt_g.state_tensors("opt.g."));
        tensors.extend(self.opt_d.state_tensors("opt.d."));
        let h = header(
            KIND_INPAINTING,
            &self.cfg,
            self.step,
            &self.rng,
            [("opt_g_steps", self.opt_g.steps()), ("opt_d_steps", self.opt_d.steps())],
        )?;
        Container::new(h, &tensors)
    }
}

fn strip_disc(t: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    t.iter().filter(|(k, _)| !k.starts_with(DISC_PREFIX)).map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Trains for `cfg.steps` steps. With a run directory, the log goes to
/// `train_log.jsonl` and checkpoints to `checkpoints/`.
pub fn train_inpainting(
    data: Dataset,
    memory: Option<&Container>,
    cfg: &TrainConfig,
    run: Option<&mut RunDir>,
) -> Result<InpaintTrainer> {
    let mut trainer = InpaintTrainer::new(cfg, data, memory)?;
    let mut run = run;
    while trainer.step_count() < cfg.steps {
        let log = trainer.step()?;
        if log.step % 100 == 0 {
            log::info!("step {}: {}", log.step, serde_json::to_string(&log)?);
        }
        if let Some(r) = run.as_deref_mut() {
            r.log(&log)?;
            if cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 && log.step < cfg.steps {
                trainer.checkpoint()?.write(r.checkpoint_path(log.step))?;
            }
        }
    }
    if let Some(r) = run {
        trainer.checkpoint()?.write(r.checkpoint_path(trainer.step_count()))?;
    }
    Ok(trainer)
}

/// Rebuilds the inpainting network stored in an inpainting checkpoint.
pub fn load_model(ckpt: &Container) -> Result<GmSrm> {
    if ckpt.header.kind != KIND_INPAINTING {
        return Err(Error::Config(format!("expected an inpainting checkpoint, got {}", ckpt.header.kind)));
    }
    let cfg: ModelConfig = serde_json::from_value(
        ckpt.header
            .model_config
            .clone()
            .ok_or_else(|| Error::Format("checkpoint lacks model_config".into()))?,
    )?;
    let mut model = GmSrm::new(&cfg, ckpt.header.seed)?;
    restore_store(model.store(), &ckpt.tensors(&Device::Cpu)?, "")?;
    model.mark_memory_ready();
    Ok(model)
}
