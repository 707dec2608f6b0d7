use std::path::Path;

use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{
    generate_center_mask, generate_mask, ImageTensor, Mask, MaskSpec, DEFAULT_RESIZE_RATIO, MIN_SIDE,
};

/// Training-time augmentation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    /// Horizontal flip with probability 1/2.
    pub hflip: bool,
    /// Random crop position instead of a centered crop.
    pub crop: bool,
    /// Shorter side is resized to `round(resize_ratio * side)` before
    /// cropping; `1.0` disables the resize margin.
    pub resize_ratio: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self { hflip: true, crop: true, resize_ratio: DEFAULT_RESIZE_RATIO }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self { hflip: false, crop: false, resize_ratio: 1.0 }
    }
}

/// Mixture of center and irregular masks drawn for every training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskMix {
    pub center_prob: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        Self { center_prob: 0.5, ratio_lo: 0.1, ratio_hi: 0.5 }
    }
}

impl MaskMix {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.center_prob) {
            return Err(invalid!("center_prob must lie in [0, 1]"));
        }
        if !(0.0 < self.ratio_lo && self.ratio_lo < self.ratio_hi && self.ratio_hi < 1.0) {
            return Err(invalid!(
                "mask ratios must satisfy 0 < lo < hi < 1, got ({}, {})",
                self.ratio_lo,
                self.ratio_hi
            ));
        }
        Ok(())
    }

    pub fn sample(&self, side: usize, rng: &mut impl Rng) -> Result<Mask> {
        if rng.random::<f64>() < self.center_prob {
            let ratio = rng.random_range(self.ratio_lo..self.ratio_hi);
            generate_center_mask(side, side, ratio)
        } else {
            let spec = MaskSpec::irregular(self.ratio_lo, self.ratio_hi, rng.random());
            generate_mask(side, side, &spec)
        }
    }
}

/// In-memory image set. Sources are stored at their resized resolution and
/// cropped to `side x side` when sampled.
#[derive(Debug, Clone)]
pub struct Dataset {
    side: usize,
    sources: Vec<ImageTensor>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

impl Dataset {
    /// Loads every PNG/JPEG in `dir` (sorted by name).
    pub fn from_dir(dir: impl AsRef<Path>, side: usize, augment: &Augment) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        paths.sort();
        let resize_side = ((side as f64 * augment.resize_ratio).round() as usize).max(side);
        let mut sources = Vec::with_capacity(paths.len());
        for p in &paths {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let img = image::load_from_memory(&bytes)?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w.min(h) < MIN_SIDE {
                return Err(invalid!("{} is smaller than {MIN_SIDE}px", p.display()));
            }
            let scale = resize_side as f64 / w.min(h) as f64;
            let nw = ((w as f64 * scale).round() as usize).max(resize_side);
            let nh = ((h as f64 * scale).round() as usize).max(resize_side);
            let resized = image::imageops::resize(&img, nw as u32, nh as u32, FilterType::Triangle);
            sources.push(ImageTensor::from_rgb8(&resized)?);
        }
        Self::from_images(sources, side)
    }

    /// Wraps already-decoded images, each at least `side` on both axes.
    pub fn from_images(sources: Vec<ImageTensor>, side: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(invalid!("dataset is empty"));
        }
        if let Some(s) = sources.iter().find(|s| s.height() < side || s.width() < side) {
            return Err(invalid!("image {}x{} is smaller than {side}", s.height(), s.width()));
        }
        Ok(Self { side, sources })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Deterministic centered crop of image `i`.
    pub fn get(&self, i: usize) -> Result<ImageTensor> {
        self.crop(i, None, false)
    }

    fn crop(&self, i: usize, offset: Option<(usize, usize)>, flip: bool) -> Result<ImageTensor> {
        let src = &self.sources[i];
        let s = self.side;
        let (max_y, max_x) = (src.height() - s, src.width() - s);
        let (oy, ox) = offset.unwrap_or((max_y / 2, max_x / 2));
        ImageTensor::from_fn(src.channels(), s, s, |c, y, x| {
            let sx = if flip { s - 1 - x } else { x };
            src.get(c, oy + y, ox + sx)
        })
    }

    /// Draws `n` augmented samples uniformly with replacement.
    pub fn sample(&self, n: usize, augment: &Augment, rng: &mut impl Rng) -> Result<Vec<ImageTensor>> {
        (0..n)
            .map(|_| {
                let i = rng.random_range(0..self.sources.len());
                let src = &self.sources[i];
                let offset = augment.crop.then(|| {
                    (
                        rng.random_range(0..=src.height() - self.side),
                        rng.random_range(0..=src.width() - self.side),
                    )
                });
                let flip = augment.hflip && rng.random::<bool>();
                self.crop(i, offset, flip)
            })
            .collect()
    }
}
