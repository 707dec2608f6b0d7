//! Full-reference quality metrics on images mapped to `[0, 1]`: PSNR, SSIM,
//! NCC and LMSE, each optionally restricted to the corrupted region.

mod dirs;

pub use dirs::{bucket_label, evaluate_dirs, write_report, BucketRange, EvalReport, ImageMetrics};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{ImageTensor, Mask};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;

/// Which pixels a metric looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Full,
    /// Missing pixels only. SSIM keeps windows centred on a missing pixel,
    /// LMSE keeps windows that contain one.
    Hole,
}

impl std::str::FromStr for Region {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Region::Full),
            "hole" => Ok(Region::Hole),
            _ => Err(crate::Error::Config(format!("unknown region {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NccMode {
    /// `sum(xy) / sqrt(sum(x^2) sum(y^2))`.
    #[default]
    Cosine,
    /// Pearson correlation: the cosine of the mean-removed signals.
    MeanRemoved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricOptions {
    #[serde(default)]
    pub region: Region,
    #[serde(default)]
    pub ncc: NccMode,
}

/// A `C x H x W` image of unconstrained reals, normally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl UnitImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_tensor(img: &ImageTensor) -> Self {
        let (channels, height, width) = img.shape();
        Self { channels, height, width, data: img.to_unit() }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn check_pair(a: &UnitImage, b: &UnitImage) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(invalid!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        ));
    }
    Ok(())
}

/// Per-pixel selection for a region; `None` means every pixel.
fn selection(region: Region, mask: Option<&Mask>, h: usize, w: usize) -> Result<Option<Vec<bool>>> {
    match region {
        Region::Full => Ok(None),
        Region::Hole => {
            let m = mask.ok_or_else(|| invalid!("hole-region metrics need a mask"))?;
            if (m.height(), m.width()) != (h, w) {
                return Err(invalid!("mask {}x{} does not match {h}x{w}", m.height(), m.width()));
            }
            let sel: Vec<bool> = m.data().iter().map(|&v| v == 0).collect();
            if !sel.contains(&true) {
                return Err(invalid!("mask has no missing pixels"));
            }
            Ok(Some(sel))
        }
    }
}

fn selected(sel: &Option<Vec<bool>>, i: usize) -> bool {
    sel.as_ref().is_none_or(|s| s[i])
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(pred: &UnitImage, gt: &UnitImage) -> Result<f64> {
    psnr_region(pred, gt, Region::Full, None)
}

pub fn psnr_region(pred: &UnitImage, gt: &UnitImage, region: Region, mask: Option<&Mask>) -> Result<f64> {
    check_pair(pred, gt)?;
    let sel = selection(region, mask, pred.height, pred.width)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..pred.channels {
        for (i, (p, g)) in pred.plane(c).iter().zip(gt.plane(c)).enumerate() {
            if selected(&sel, i) {
                sum += (p - g) * (p - g);
                n += 1;
            }
        }
    }
    Ok(psnr_from_mse(sum / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(t, &c)| c * x[y * w + x0 + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(t, &c)| c * rows[(y0 + t) * ow + x0]).sum();
        }
    }
    out
}

/// SSIM map of one channel over the valid window positions.
fn ssim_map(p: &[f64], g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_p = filter_valid(p, h, w, &taps);
    let mu_g = filter_valid(g, h, w, &taps);
    let pp = filter_valid(&prod(p, p), h, w, &taps);
    let gg = filter_valid(&prod(g, g), h, w, &taps);
    let pg = filter_valid(&prod(p, g), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    (0..mu_p.len())
        .map(|i| {
            let (mp, mg) = (mu_p[i], mu_g[i]);
            let vp = pp[i] - mp * mp;
            let vg = gg[i] - mg * mg;
            let cov = pg[i] - mp * mg;
            ((2.0 * mp * mg + c1) * (2.0 * cov + c2)) / ((mp * mp + mg * mg + c1) * (vp + vg + c2))
        })
        .collect()
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1),
/// averaged over the map and channels.
pub fn ssim(pred: &UnitImage, gt: &UnitImage) -> Result<f64> {
    ssim_region(pred, gt, Region::Full, None)
}

pub fn ssim_region(pred: &UnitImage, gt: &UnitImage, region: Region, mask: Option<&Mask>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    if h.min(w) < SSIM_WINDOW {
        return Err(invalid!("SSIM needs sides of at least {SSIM_WINDOW}, got {h}x{w}"));
    }
    let sel = selection(region, mask, h, w)?;
    let half = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..pred.channels {
        for (i, v) in ssim_map(pred.plane(c), gt.plane(c), h, w).into_iter().enumerate() {
            let centre = (i / ow + half) * w + i % ow + half;
            if selected(&sel, centre) {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(invalid!("no SSIM window is centred in the selected region"));
    }
    Ok(sum / n as f64)
}

/// Normalized cross-correlation averaged over channels.
pub fn ncc(pred: &UnitImage, gt: &UnitImage) -> Result<f64> {
    ncc_with(pred, gt, NccMode::Cosine, Region::Full, None)
}

pub fn ncc_with(
    pred: &UnitImage,
    gt: &UnitImage,
    mode: NccMode,
    region: Region,
    mask: Option<&Mask>,
) -> Result<f64> {
    check_pair(pred, gt)?;
    let sel = selection(region, mask, pred.height, pred.width)?;
    let mut total = 0.0;
    for c in 0..pred.channels {
        let pairs: Vec<(f64, f64)> = pred
            .plane(c)
            .iter()
            .zip(gt.plane(c))
            .enumerate()
            .filter(|(i, _)| selected(&sel, *i))
            .map(|(_, (&p, &g))| (p, g))
            .collect();
        let (mp, mg) = match mode {
            NccMode::Cosine => (0.0, 0.0),
            NccMode::MeanRemoved => {
                let n = pairs.len() as f64;
                (
                    pairs.iter().map(|p| p.0).sum::<f64>() / n,
                    pairs.iter().map(|p| p.1).sum::<f64>() / n,
                )
            }
        };
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for &(p, g) in &pairs {
            let (x, y) = (p - mp, g - mg);
            xy += x * y;
            xx += x * x;
            yy += y * y;
        }
        if yy <= 0.0 {
            return Err(invalid!("NCC is undefined for a zero-energy reference (channel {c})"));
        }
        if xx <= 0.0 {
            continue;
        }
        total += xy / (xx * yy).sqrt();
    }
    Ok(total / pred.channels as f64)
}

/// Local scale-invariant MSE over 20x20 windows at stride 10, per channel:
/// `sum_w min_a ||a p_w - g_w||^2 / n` normalized by `sum_w ||g_w||^2 / n`.
pub fn lmse(pred: &UnitImage, gt: &UnitImage) -> Result<f64> {
    lmse_region(pred, gt, Region::Full, None)
}

pub fn lmse_region(pred: &UnitImage, gt: &UnitImage, region: Region, mask: Option<&Mask>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    if h.min(w) < LMSE_WINDOW {
        return Err(invalid!("LMSE needs sides of at least {LMSE_WINDOW}, got {h}x{w}"));
    }
    let sel = selection(region, mask, h, w)?;
    let n = (LMSE_WINDOW * LMSE_WINDOW) as f64;
    let (mut err, mut norm) = (0.0, 0.0);
    for c in 0..pred.channels {
        let (p, g) = (pred.plane(c), gt.plane(c));
        for y0 in (0..=h - LMSE_WINDOW).step_by(LMSE_STRIDE) {
            for x0 in (0..=w - LMSE_WINDOW).step_by(LMSE_STRIDE) {
                let idx = (y0..y0 + LMSE_WINDOW)
                    .flat_map(|y| (x0..x0 + LMSE_WINDOW).map(move |x| y * w + x));
                if sel.is_some() && !idx.clone().any(|i| selected(&sel, i)) {
                    continue;
                }
                let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
                for i in idx.clone() {
                    pg += p[i] * g[i];
                    pp += p[i] * p[i];
                    gg += g[i] * g[i];
                }
                let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
                let resid: f64 = idx.map(|i| (alpha * p[i] - g[i]).powi(2)).sum();
                err += resid / n;
                norm += gg / n;
            }
        }
    }
    if err == 0.0 {
        return Ok(0.0);
    }
    if norm <= 0.0 {
        return Err(invalid!("LMSE is undefined for a zero-energy reference"));
    }
    Ok(err / norm)
}

/// The four metrics of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub lmse: f64,
}

impl MetricValues {
    pub fn compute(pred: &UnitImage, gt: &UnitImage, mask: Option<&Mask>, opts: &MetricOptions) -> Result<Self> {
        Ok(Self {
            psnr: psnr_region(pred, gt, opts.region, mask)?,
            ssim: ssim_region(pred, gt, opts.region, mask)?,
            ncc: ncc_with(pred, gt, opts.ncc, opts.region, mask)?,
            lmse: lmse_region(pred, gt, opts.region, mask)?,
        })
    }

    pub fn for_images(pred: &ImageTensor, gt: &ImageTensor, mask: Option<&Mask>, opts: &MetricOptions) -> Result<Self> {
        Self::compute(&UnitImage::from_tensor(pred), &UnitImage::from_tensor(gt), mask, opts)
    }
}

/// Averages over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub lmse: f64,
    pub n_images: usize,
    pub bucket: Option<BucketRange>,
}

impl MetricsReport {
    pub fn mean(values: &[MetricValues], bucket: Option<BucketRange>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid!("cannot average zero images"));
        }
        let n = values.len() as f64;
        let avg = |f: fn(&MetricValues) -> f64| values.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr: avg(|v| v.psnr),
            ssim: avg(|v| v.ssim),
            ncc: avg(|v| v.ncc),
            lmse: avg(|v| v.lmse),
            n_images: values.len(),
            bucket,
        })
    }
}
