use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MetricOptions, MetricValues, MetricsReport, UnitImage};
use crate::error::{invalid, Error, Result};
use crate::imaging::{ImageTensor, Mask};

pub const REPORT_VERSION: u32 = 1;

/// Corruption-ratio bucket `(lo/10, hi/10]`, stored in tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketRange {
    pub lo_tenths: u8,
    pub hi_tenths: u8,
}

impl BucketRange {
    /// Bucket of a mask with `missing` of `total` pixels missing. A ratio of
    /// exactly zero falls in the first bucket.
    pub fn of(missing: usize, total: usize) -> Self {
        let k = (missing * 10).div_ceil(total.max(1)).saturating_sub(1).min(9) as u8;
        Self { lo_tenths: k, hi_tenths: k + 1 }
    }
}

pub fn bucket_label(b: &BucketRange) -> String {
    format!("({:.1},{:.1}]", b.lo_tenths as f64 / 10.0, b.hi_tenths as f64 / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub file: String,
    pub mask_ratio: f64,
    pub bucket: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Result of a directory evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub options: MetricOptions,
    pub overall: MetricsReport,
    pub buckets: BTreeMap<BucketRange, MetricsReport>,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    /// `{format_version, region, ncc_mode, n_images, counts, metrics: {metric: {bucket: value}}}`,
    /// where bucket `all` covers every image.
    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        let fields: [(&str, fn(&MetricsReport) -> f64); 4] = [
            ("psnr", |r| r.psnr),
            ("ssim", |r| r.ssim),
            ("ncc", |r| r.ncc),
            ("lmse", |r| r.lmse),
        ];
        for (name, get) in fields {
            let mut per = serde_json::Map::new();
            per.insert("all".into(), get(&self.overall).into());
            for (b, r) in &self.buckets {
                per.insert(bucket_label(b), get(r).into());
            }
            metrics.insert(name.into(), per.into());
        }
        let counts: serde_json::Map<_, _> = std::iter::once(("all".to_string(), self.overall.n_images.into()))
            .chain(self.buckets.iter().map(|(b, r)| (bucket_label(b), r.n_images.into())))
            .collect();
        serde_json::json!({
            "format_version": REPORT_VERSION,
            "region": self.options.region,
            "ncc_mode": self.options.ncc,
            "n_images": self.overall.n_images,
            "counts": counts,
            "metrics": metrics,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,mask_ratio,bucket,psnr,ssim,ncc,lmse\n");
        for m in &self.per_image {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.file, m.mask_ratio, m.bucket, m.values.psnr, m.values.ssim, m.values.ncc, m.values.lmse
            ));
        }
        s
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

/// Scores every `pred_dir/NAME` against `gt_dir/NAME` using the mask
/// `mask_dir/NAME`, grouping images by the mask's corruption ratio.
pub fn evaluate_dirs(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    mask_dir: impl AsRef<Path>,
    options: &MetricOptions,
) -> Result<EvalReport> {
    let (pred_dir, gt_dir, mask_dir) = (pred_dir.as_ref(), gt_dir.as_ref(), mask_dir.as_ref());
    let names = png_names(pred_dir)?;
    for (dir, other) in [(gt_dir, png_names(gt_dir)?), (mask_dir, png_names(mask_dir)?)] {
        if other != names {
            let missing: Vec<_> = names.symmetric_difference(&other).take(5).cloned().collect();
            return Err(invalid!(
                "{} and {} hold different file names (e.g. {missing:?})",
                pred_dir.display(),
                dir.display()
            ));
        }
    }
    if names.is_empty() {
        return Err(invalid!("no PNG images in {}", pred_dir.display()));
    }
    let mut per_image = Vec::with_capacity(names.len());
    let mut grouped: BTreeMap<BucketRange, Vec<MetricValues>> = BTreeMap::new();
    let mut all = Vec::with_capacity(names.len());
    for name in &names {
        let pred = ImageTensor::read(pred_dir.join(name))?;
        let gt = ImageTensor::read(gt_dir.join(name))?;
        let mask = Mask::load_png(mask_dir.join(name))?;
        if pred.shape() != gt.shape() || (mask.height(), mask.width()) != (gt.height(), gt.width()) {
            return Err(invalid!("{name}: prediction, reference and mask sizes differ"));
        }
        let values = MetricValues::compute(
            &UnitImage::from_tensor(&pred),
            &UnitImage::from_tensor(&gt),
            Some(&mask),
            options,
        )
        .map_err(|e| invalid!("{name}: {e}"))?;
        let total = mask.height() * mask.width();
        let bucket = BucketRange::of(mask.missing_count(), total);
        per_image.push(ImageMetrics {
            file: name.clone(),
            mask_ratio: mask.missing_count() as f64 / total as f64,
            bucket: bucket_label(&bucket),
            values,
        });
        grouped.entry(bucket).or_default().push(values);
        all.push(values);
    }
    let buckets = grouped
        .into_iter()
        .map(|(b, v)| Ok((b, MetricsReport::mean(&v, Some(b))?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        options: *options,
        overall: MetricsReport::mean(&all, None)?,
        buckets,
        per_image,
    })
}

/// Writes the JSON report to `path` and the per-image CSV beside it.
/// Returns the CSV path.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(&report.to_json())?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}
