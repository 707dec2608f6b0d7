use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use gmsrm::checkpoint::Container;
use gmsrm::imaging::{composite, generate_mask, load_image_with, Mask, MaskKind, MaskSpec};
use gmsrm::metrics::{evaluate_dirs, write_report, MetricOptions, NccMode, Region};
use gmsrm::training::{
    load_model, pretrain_memory, train_inpainting, Dataset, RunDir, TrainConfig,
};
use gmsrm::{Error, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent arguments (exit code 2).
    Args(String),
    /// Failure while doing the work (exit code 1).
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn args_err(e: impl std::fmt::Display) -> CliError {
    CliError::Args(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "gmsrm", version, about = "Generative-memory guided image inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the generative memory on intact images.
    PretrainMemory(PretrainArgs),
    /// Train the inpainting network with the memory frozen.
    Train(TrainArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// Write a set of seeded masks as PNGs.
    MakeMasks(MakeMasksArgs),
    /// Score predictions against references, grouped by mask ratio.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Base,
    GmBm,
    GmCsv,
    GmSrm,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::GmBm => Variant::GmBm,
            VariantArg::GmCsv => Variant::GmCsv,
            VariantArg::GmSrm => Variant::GmSrm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Center,
    Irregular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Full,
    Hole,
}

/// Flags shared by the training subcommands. Unset flags fall back to the
/// `--config` file, then to the built-in defaults.
#[derive(Debug, clap::Args)]
pub struct TrainFlags {
    /// JSON training configuration (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Working image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Memory checkpoint from `pretrain-memory` (not used by `base`).
    #[arg(long)]
    memory: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Binary mask PNG, white = known.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Paste the known pixels back over the prediction.
    #[arg(long, value_enum, default_value = "on")]
    composite: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct MakeMasksArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    ratio_lo: f64,
    /// Upper ratio; center masks use this value as their area ratio.
    #[arg(long)]
    ratio_hi: f64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// JSON report path; the per-image CSV is written beside it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    region: RegionArg,
    /// Use mean-removed NCC instead of the cosine form.
    #[arg(long)]
    ncc_mean_removed: bool,
}

/// Fully resolved arguments of a training run, as written to
/// `config.resolved.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub command: String,
    pub data: Option<PathBuf>,
    pub memory: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            command: String::new(),
            data: None,
            memory: None,
            out: PathBuf::new(),
            train: TrainConfig::default(),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| args_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| args_err(format!("{}: {e}", path.display())))
}

fn write_resolved(dir: &Path, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::Io { path: dir.into(), source: e }))?;
    let path = dir.join(RESOLVED_CONFIG);
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(&path, text).map_err(|e| CliError::Runtime(Error::Io { path, source: e }))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Defaults, then the `--config` file (a `TrainConfig`, optionally wrapped
/// with `data`/`memory` fields), then explicit flags.
fn resolve_train(command: &str, flags: &TrainFlags) -> Result<TrainRun> {
    let mut run = match &flags.config {
        Some(p) => {
            let value: serde_json::Value = read_json(p)?;
            if value.get("train").is_some() {
                serde_json::from_value::<TrainRun>(value).map_err(args_err)?
            } else {
                TrainRun {
                    train: serde_json::from_value(value).map_err(args_err)?,
                    ..TrainRun::default()
                }
            }
        }
        None => TrainRun::default(),
    };
    run.command = command.to_string();
    run.out = flags.out.clone();
    if let Some(d) = &flags.data {
        run.data = Some(d.clone());
    }
    if let Some(s) = flags.size {
        run.train.model.image_side = s;
    }
    if let Some(s) = flags.steps {
        run.train.steps = s;
    }
    if let Some(s) = flags.seed {
        run.train.seed = s;
    }
    if let Some(b) = flags.batch_size {
        run.train.batch_size = b;
    }
    Ok(run)
}

fn dataset(run: &TrainRun) -> Result<Dataset> {
    let dir = run.data.as_ref().ok_or_else(|| args_err("--data is required"))?;
    Ok(Dataset::from_dir(dir, run.train.model.image_side, &run.train.augment)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainMemory(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::MakeMasks(a) => make_masks(a),
        Command::Eval(a) => eval(a),
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let run = resolve_train("pretrain-memory", &a.flags)?;
    run.train.validate().map_err(args_err)?;
    let data_dir = run.data.clone().ok_or_else(|| args_err("--data is required"))?;
    write_resolved(&run.out, &run)?;
    let data = dataset(&run)?;
    log::info!("pre-training memory on {} images from {}", data.len(), data_dir.display());
    let mut dir = RunDir::create(&run.out, "pretrain_log.jsonl")?;
    let ckpt = pretrain_memory(data, &run.train, Some(&mut dir))?;
    let path = run.out.join("memory.gmsrm");
    ckpt.write(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = resolve_train("train", &a.flags)?;
    if let Some(v) = a.variant {
        run.train.model.variant = v.into();
    }
    if let Some(m) = &a.memory {
        run.memory = Some(m.clone());
    }
    run.train.validate().map_err(args_err)?;
    if run.train.model.variant.uses_memory() && run.memory.is_none() {
        return Err(args_err(format!("--memory is required for variant {}", run.train.model.variant)));
    }
    if run.data.is_none() {
        return Err(args_err("--data is required"));
    }
    write_resolved(&run.out, &run)?;
    let memory = match (&run.memory, run.train.model.variant.uses_memory()) {
        (Some(p), true) => Some(Container::read(p)?),
        _ => None,
    };
    let data = dataset(&run)?;
    log::info!("training {} on {} images", run.train.model.variant, data.len());
    let mut dir = RunDir::create(&run.out, "train_log.jsonl")?;
    let trainer = train_inpainting(data, memory.as_ref(), &run.train, Some(&mut dir))?;
    let path = run.out.join("model.gmsrm");
    trainer.checkpoint()?.write(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferRun<'a> {
    command: &'a str,
    ckpt: &'a Path,
    image: &'a Path,
    mask: &'a Path,
    out: &'a Path,
    composite: bool,
    seed: u64,
}

fn infer(a: InferArgs) -> Result<()> {
    let resolved = InferRun {
        command: "infer",
        ckpt: &a.ckpt,
        image: &a.image,
        mask: &a.mask,
        out: &a.out,
        composite: a.composite == Switch::On,
        seed: a.seed,
    };
    write_resolved(&parent_dir(&a.out), &resolved)?;
    let model = load_model(&Container::read(&a.ckpt)?)?;
    let side = model.config().image_side;
    let img = load_image_with(&a.image, side, side)?;
    let mask = Mask::load_png(&a.mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pred = model.infer(&img, &mask, &mut rng)?;
    let out = if resolved.composite { composite(&pred, &img, &mask)? } else { pred };
    out.save_png(&a.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MaskRun<'a> {
    command: &'a str,
    kind: MaskKind,
    ratio_lo: f64,
    ratio_hi: f64,
    count: usize,
    size: usize,
    out: &'a Path,
    seed: u64,
}

fn make_masks(a: MakeMasksArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Center => MaskKind::Center,
        KindArg::Irregular => MaskKind::Irregular,
    };
    let spec = MaskSpec { kind, ratio_lo: a.ratio_lo, ratio_hi: a.ratio_hi, seed: a.seed };
    match kind {
        MaskKind::Center if !(a.ratio_hi > 0.0 && a.ratio_hi <= 1.0 && a.ratio_lo <= a.ratio_hi) => {
            return Err(args_err("center masks need 0 < ratio-hi <= 1 and ratio-lo <= ratio-hi"));
        }
        MaskKind::Center => {}
        MaskKind::Irregular => spec.validate().map_err(args_err)?,
    }
    if a.size < gmsrm::imaging::MIN_SIDE {
        return Err(args_err(format!("--size must be at least {}", gmsrm::imaging::MIN_SIDE)));
    }
    let resolved = MaskRun {
        command: "make-masks",
        kind,
        ratio_lo: a.ratio_lo,
        ratio_hi: a.ratio_hi,
        count: a.count,
        size: a.size,
        out: &a.out,
        seed: a.seed,
    };
    write_resolved(&a.out, &resolved)?;
    for i in 0..a.count {
        let spec = MaskSpec { seed: a.seed.wrapping_add(i as u64), ..spec };
        let m = generate_mask(a.size, a.size, &spec)?;
        m.save_png(a.out.join(format!("mask_{i:05}.png")))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRun<'a> {
    command: &'a str,
    pred: &'a Path,
    gt: &'a Path,
    masks: &'a Path,
    report: &'a Path,
    options: MetricOptions,
}

fn eval(a: EvalArgs) -> Result<()> {
    let options = MetricOptions {
        region: match a.region {
            RegionArg::Full => Region::Full,
            RegionArg::Hole => Region::Hole,
        },
        ncc: if a.ncc_mean_removed { NccMode::MeanRemoved } else { NccMode::Cosine },
    };
    let resolved = EvalRun {
        command: "eval",
        pred: &a.pred,
        gt: &a.gt,
        masks: &a.masks,
        report: &a.report,
        options,
    };
    write_resolved(&parent_dir(&a.report), &resolved)?;
    let report = evaluate_dirs(&a.pred, &a.gt, &a.masks, &options)?;
    write_report(&report, &a.report)?;
    let r = &report.overall;
    println!(
        "{} images: psnr {:.4} ssim {:.4} ncc {:.4} lmse {:.6}",
        r.n_images, r.psnr, r.ssim, r.ncc, r.lmse
    );
    Ok(())
}
