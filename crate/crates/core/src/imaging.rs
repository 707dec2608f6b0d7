//! Images, masks and the corruption protocol.
//!
//! Images live in `[-1, 1]` as `C×H×W` planes. Masks use a single polarity
//! everywhere in this crate: `1` marks a known pixel, `0` a missing one.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest accepted spatial side for images and masks.
pub const MIN_SIDE: usize = 8;

/// Ratio of the pre-crop resize side to the crop side (320 for a 256 crop).
pub const DEFAULT_RESIZE_RATIO: f64 = 1.25;

/// Irregular-mask corruption buckets used for evaluation, as `(lo, hi]`.
pub const IRREGULAR_BUCKETS: [(f64, f64); 4] = [(0.2, 0.3), (0.3, 0.4), (0.4, 0.5), (0.5, 0.6)];

/// Center-mask area ratios used for evaluation.
pub const CENTER_RATIOS: [f64; 2] = [0.25, 0.50];

const RANGE_TOL: f32 = 1e-6;

/// A `C×H×W` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid!("image must have at least one channel"));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(invalid!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            ));
        }
        if data.len() != channels * height * width {
            return Err(invalid!(
                "image buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            ));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || v.abs() > 1.0 + RANGE_TOL)
        {
            return Err(invalid!("image value {v} outside [-1, 1]"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Values mapped from `[-1, 1]` to `[0, 1]`, as used by the metrics.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| (v as f64 + 1.0) * 0.5).collect()
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
        })
    }

    /// Quantizes to 8 bits. Grayscale images are replicated across RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| q(self.get(c.min(self.channels - 1), y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads an image at its native resolution (no resize or crop).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = open_image(path.as_ref())?;
        Self::from_rgb8(&img.to_rgb8())
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?)
}

/// Loads an image, resizes its shorter side to `round(1.25 * target_side)`
/// and center-crops a `target_side` square.
pub fn load_image(path: impl AsRef<Path>, target_side: usize) -> Result<ImageTensor> {
    let resize_side = (target_side as f64 * DEFAULT_RESIZE_RATIO).round() as usize;
    load_image_with(path, target_side, resize_side)
}

pub fn load_image_with(
    path: impl AsRef<Path>,
    target_side: usize,
    resize_side: usize,
) -> Result<ImageTensor> {
    let img = open_image(path.as_ref())?;
    resize_and_crop(&img, target_side, resize_side, None)
}

/// Shorter-side resize followed by a square crop. `offset` selects the crop
/// origin (clamped into range); `None` centers it.
pub fn resize_and_crop(
    img: &DynamicImage,
    target_side: usize,
    resize_side: usize,
    offset: Option<(usize, usize)>,
) -> Result<ImageTensor> {
    if target_side < MIN_SIDE {
        return Err(invalid!("target side {target_side} is below {MIN_SIDE}"));
    }
    if resize_side < target_side {
        return Err(invalid!(
            "resize side {resize_side} is smaller than crop side {target_side}"
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w.min(h) < MIN_SIDE {
        return Err(invalid!("source image {w}x{h} is smaller than {MIN_SIDE}px"));
    }
    let scale = resize_side as f64 / w.min(h) as f64;
    let (nw, nh) = if w <= h {
        (resize_side, ((h as f64 * scale).round() as usize).max(resize_side))
    } else {
        (((w as f64 * scale).round() as usize).max(resize_side), resize_side)
    };
    let rgb = img.to_rgb8();
    let resized = if (nw, nh) == (w, h) {
        rgb
    } else {
        image::imageops::resize(&rgb, nw as u32, nh as u32, FilterType::Triangle)
    };
    let (max_x, max_y) = (nw - target_side, nh - target_side);
    let (ox, oy) = match offset {
        Some((x, y)) => (x.min(max_x), y.min(max_y)),
        None => (max_x / 2, max_y / 2),
    };
    let cropped =
        image::imageops::crop_imm(&resized, ox as u32, oy as u32, target_side as u32, target_side as u32)
            .to_image();
    ImageTensor::from_rgb8(&cropped)
}

/// Binary `H×W` mask, `1` = known and `0` = missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("mask must be non-empty"));
        }
        if data.len() != height * width {
            return Err(invalid!(
                "mask buffer has {} values, expected {}",
                data.len(),
                height * width
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid!("mask entries must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn all_known(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, known: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| known(i / width, i % width) as u8)
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Checks the corruption-task requirement: some pixels known, some missing.
    pub fn check_corruption(&self) -> Result<()> {
        let missing = self.missing_count();
        if missing == 0 || missing == self.data.len() {
            return Err(invalid!(
                "mask must contain both known and missing pixels ({missing} of {} missing)",
                self.data.len()
            ));
        }
        Ok(())
    }

    /// Stored as 8-bit grayscale, 255 = known and 0 = missing.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        });
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads a grayscale PNG; values `>= 128` are known.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = open_image(path.as_ref())?.to_luma8();
        let data = img.pixels().map(|p| (p[0] >= 128) as u8).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }
}

/// Fraction of missing pixels.
pub fn corruption_ratio(m: &Mask) -> f64 {
    m.missing_count() as f64 / m.data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Center,
    Irregular,
}

/// Describes one mask bucket: center masks use `ratio_hi` as the area ratio,
/// irregular masks land in `(ratio_lo, ratio_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn irregular(ratio_lo: f64, ratio_hi: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::Irregular,
            ratio_lo,
            ratio_hi,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.ratio_lo)
            && self.ratio_hi > 0.0
            && self.ratio_hi <= 1.0
            && self.ratio_lo < self.ratio_hi;
        if !ok {
            return Err(invalid!(
                "mask bucket ({}, {}] must satisfy 0 <= lo < hi <= 1",
                self.ratio_lo,
                self.ratio_hi
            ));
        }
        Ok(())
    }

    pub fn contains(&self, ratio: f64) -> bool {
        ratio > self.ratio_lo && ratio <= self.ratio_hi
    }
}

/// Side of the centered square hole for an area ratio.
pub fn center_hole_side(h: usize, w: usize, ratio: f64) -> usize {
    let side = (h.min(w) as f64 * ratio.sqrt()).round() as usize;
    side.clamp(1, h.min(w))
}

/// Centered square hole covering `ratio` of the area (rounded to whole pixels).
pub fn generate_center_mask(h: usize, w: usize, ratio: f64) -> Result<Mask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid!("center mask ratio {ratio} outside (0, 1)"));
    }
    if h == 0 || w == 0 {
        return Err(invalid!("mask must be non-empty"));
    }
    let side = center_hole_side(h, w, ratio);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    Ok(Mask::from_fn(h, w, |y, x| {
        !(y >= top && y < top + side && x >= left && x < left + side)
    }))
}

const MAX_STROKE_ATTEMPTS: usize = 1000;

/// Seeded free-form brush-stroke mask whose corruption ratio lands in the
/// spec's `(ratio_lo, ratio_hi]` bucket.
///
/// Strokes are random walks stamped with a round brush 5–40 px wide at a
/// 256 px reference size (scaled with the image). A stroke that would push
/// the ratio past `ratio_hi` is rejected and the brush budget shrinks.
pub fn generate_irregular_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Mask> {
    if spec.kind != MaskKind::Irregular {
        return Err(invalid!("generate_irregular_mask needs an irregular spec"));
    }
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(invalid!("mask must be non-empty"));
    }
    let total = (h * w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planned: usize = rng.random_range(1..=12);
    let target = rng.random_range(spec.ratio_lo..=spec.ratio_hi);
    let scale = h.min(w) as f64 / 256.0;

    let mut holes = vec![false; h * w];
    let mut missing = 0usize;
    let mut drawn = 0usize;
    let mut shrink = 1.0f64;
    for _ in 0..MAX_STROKE_ATTEMPTS {
        let ratio = missing as f64 / total;
        if spec.contains(ratio) {
            return Ok(Mask::from_fn(h, w, |y, x| !holes[y * w + x]));
        }
        let remaining = planned.saturating_sub(drawn).max(1);
        let want = (target - ratio).max(1.0 / total) * total / remaining as f64 * shrink;
        let mut candidate = holes.clone();
        let added = paint_stroke(&mut candidate, h, w, &mut rng, scale, want.max(1.0));
        if (missing + added) as f64 / total <= spec.ratio_hi {
            holes = candidate;
            missing += added;
            drawn += 1;
        } else {
            shrink *= 0.5;
        }
    }
    let ratio = missing as f64 / total;
    if spec.contains(ratio) {
        return Ok(Mask::from_fn(h, w, |y, x| !holes[y * w + x]));
    }
    Err(Error::GenerationFailure(format!(
        "bucket ({}, {}] not reached for {h}x{w} after {MAX_STROKE_ATTEMPTS} stroke attempts (ratio {ratio:.4})",
        spec.ratio_lo, spec.ratio_hi
    )))
}

/// Paints one random-walk stroke of roughly `area` pixels. Returns how many
/// pixels changed from known to missing.
fn paint_stroke(
    holes: &mut [bool],
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
    scale: f64,
    area: f64,
) -> usize {
    let max_width = (40.0 * scale).max(1.0);
    let min_width = (5.0 * scale).clamp(1.0, max_width);
    let mut width = rng.random_range(min_width..=max_width);
    // Small budgets need a thin brush or a single dab already overshoots.
    width = width.min(area.sqrt()).max(1.0);
    let radius = width / 2.0;
    let length = (area / width).max(1.0);
    let vertices: usize = rng.random_range(2..=8);
    let seg_len = length / vertices as f64;

    let mut x = rng.random_range(0.0..w as f64);
    let mut y = rng.random_range(0.0..h as f64);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut added = 0;
    added += stamp(holes, h, w, x, y, radius);
    for _ in 0..vertices {
        angle += rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let nx = (x + seg_len * angle.cos()).clamp(0.0, w as f64 - 1.0);
        let ny = (y + seg_len * angle.sin()).clamp(0.0, h as f64 - 1.0);
        let dist = ((nx - x).powi(2) + (ny - y).powi(2)).sqrt();
        let step = (radius * 0.5).max(0.5);
        let n = (dist / step).ceil() as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            added += stamp(holes, h, w, x + t * (nx - x), y + t * (ny - y), radius);
        }
        x = nx;
        y = ny;
    }
    added
}

fn stamp(holes: &mut [bool], h: usize, w: usize, cx: f64, cy: f64, radius: f64) -> usize {
    let r2 = radius * radius;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(h - 1);
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(w - 1);
    let mut added = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 && !holes[y * w + x] {
                holes[y * w + x] = true;
                added += 1;
            }
        }
    }
    // The brush always covers the pixel under its center.
    let (px, py) = (cx.round().min(w as f64 - 1.0) as usize, cy.round().min(h as f64 - 1.0) as usize);
    if !holes[py * w + px] {
        holes[py * w + px] = true;
        added += 1;
    }
    added
}

/// Generates a mask according to `spec`; center masks use `ratio_hi`.
pub fn generate_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Mask> {
    match spec.kind {
        MaskKind::Center => generate_center_mask(h, w, spec.ratio_hi),
        MaskKind::Irregular => generate_irregular_mask(h, w, spec),
    }
}

fn check_spatial(img: &ImageTensor, m: &Mask) -> Result<()> {
    if img.height != m.height || img.width != m.width {
        return Err(invalid!(
            "image {}x{} and mask {}x{} differ in size",
            img.height,
            img.width,
            m.height,
            m.width
        ));
    }
    Ok(())
}

/// Keeps known pixels and sets missing ones to `0.0` in every channel.
pub fn apply_mask(img: &ImageTensor, m: &Mask) -> Result<ImageTensor> {
    check_spatial(img, m)?;
    let plane = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if m.data[i % plane] == 1 { v } else { 0.0 })
        .collect();
    Ok(ImageTensor { data, ..*img })
}

/// `m * input + (1 - m) * pred`, per channel.
pub fn composite(pred: &ImageTensor, input: &ImageTensor, m: &Mask) -> Result<ImageTensor> {
    if pred.shape() != input.shape() {
        return Err(invalid!(
            "prediction {:?} and input {:?} differ in shape",
            pred.shape(),
            input.shape()
        ));
    }
    check_spatial(pred, m)?;
    let plane = pred.height * pred.width;
    let data = pred
        .data
        .iter()
        .zip(&input.data)
        .enumerate()
        .map(|(i, (&p, &x))| if m.data[i % plane] == 1 { x } else { p })
        .collect();
    Ok(ImageTensor { data, ..*pred })
}

/// Stacks images into a `(B, C, H, W)` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("cannot batch zero images"))?;
    let (c, h, w) = first.shape();
    if images.iter().any(|i| i.shape() != (c, h, w)) {
        return Err(invalid!("batched images must share a shape"));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks masks into a `(B, 1, H, W)` tensor of 0/1 values.
pub fn masks_to_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| invalid!("cannot batch zero masks"))?;
    let (h, w) = (first.height, first.width);
    if masks.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(invalid!("batched masks must share a shape"));
    }
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, C, H, W)` tensor back into images, clamping into `[-1, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(c * h * w)
        .take(b)
        .map(|chunk| ImageTensor::new(c, h, w, chunk.iter().map(|v| v.clamp(-1.0, 1.0)).collect()))
        .collect()
}
