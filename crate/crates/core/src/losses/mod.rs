//! Training objectives: region-weighted L1 reconstruction, perceptual
//! distance, adversarial terms on a spectrally normalized discriminator and
//! the KL regularizer on the conditional noise distributions.

mod discriminator;
mod perceptual;

pub use discriminator::{Critic, Discriminator, DiscriminatorCritic, SnMode};
pub use perceptual::{perceptual_loss, ConvFeatureExtractor, FeatureExtractor, PixelFeatures};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::NoiseDist;

/// Every scalar weight of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the corrupted-region L1 inside the reconstruction loss.
    pub gamma: f64,
    /// `(reconstruction, perceptual, adversarial, KL)`.
    pub lambda: [f64; 4],
    /// Per-scale KL weights.
    pub scale_weights: Vec<f64>,
}

impl LossWeights {
    pub fn new(n_scales: usize) -> Self {
        let n = n_scales.saturating_sub(1).max(1);
        Self {
            gamma: 10.0,
            lambda: [1.0, 0.1, 0.01, 0.01],
            scale_weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.gamma)
            .chain(self.lambda)
            .chain(self.scale_weights.iter().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("loss weights must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// The four generator loss terms.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub rec: Tensor,
    pub perc: Tensor,
    pub adv: Tensor,
    pub kl: Tensor,
}

/// `lambda1*rec + lambda2*perc + lambda3*adv + lambda4*kl`.
pub fn total_loss(parts: &LossParts, lw: &LossWeights) -> Result<Tensor> {
    let [l1, l2, l3, l4] = lw.lambda;
    let t = ((parts.rec.affine(l1, 0.0)? + parts.perc.affine(l2, 0.0)?)?
        + (parts.adv.affine(l3, 0.0)? + parts.kl.affine(l4, 0.0)?)?)?;
    Ok(t)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid!("shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// `L_known + gamma * L_corrupted`, where each term is the mean absolute
/// error over the pixels (and channels) of its region. An empty region
/// contributes zero. `mask` is `(B, 1, H, W)` with 1 = known.
pub fn reconstruction_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor, gamma: f64) -> Result<Tensor> {
    check_same(pred, gt)?;
    let (b, c, h, w) = pred.dims4()?;
    if mask.dims4()? != (b, 1, h, w) {
        return Err(invalid!("mask {:?} does not match {:?}", mask.dims(), pred.dims()));
    }
    let mask = mask.detach();
    let diff = (pred - gt)?.abs()?;
    let known_px: f64 = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    let hole_px = (b * h * w) as f64 - known_px;
    let region = |weights: &Tensor, px: f64| -> Result<Tensor> {
        if px <= 0.0 {
            return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
        }
        Ok(diff
            .broadcast_mul(weights)?
            .sum_all()?
            .affine(1.0 / (px * c as f64), 0.0)?)
    };
    let known = region(&mask, known_px)?;
    let hole = region(&mask.affine(-1.0, 1.0)?, hole_px)?;
    Ok((known + hole.affine(gamma, 0.0)?)?)
}

/// `-E[D(pred)]`.
pub fn adversarial_generator_loss(d: &dyn Critic, pred: &Tensor) -> Result<Tensor> {
    Ok(d.score(pred)?.mean_all()?.neg()?)
}

/// `E[1 - D(gt)] + E[D(pred)]`, with `pred` detached from the generator.
pub fn discriminator_loss(d: &dyn Critic, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    let real = d.score(gt)?.mean_all()?.affine(-1.0, 1.0)?;
    let fake = d.score(&pred.detach())?.mean_all()?;
    Ok((real + fake)?)
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_normal(mu: f64, sigma: f64) -> f64 {
    0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * sigma.ln())
}

/// `sum_i w_i * KL(N(mu_i, sigma_i^2) || N(0, 1))`, each term averaged over
/// the batch.
pub fn kl_loss(dists: &[NoiseDist], weights: &[f64]) -> Result<Tensor> {
    if dists.len() != weights.len() {
        return Err(invalid!(
            "{} distributions but {} scale weights",
            dists.len(),
            weights.len()
        ));
    }
    let mut total: Option<Tensor> = None;
    for (d, &w) in dists.iter().zip(weights) {
        let min_sigma: f64 = d.sigma.to_dtype(DType::F64)?.min_all()?.to_scalar()?;
        if !(min_sigma > 0.0) {
            return Err(invalid!("sigma must be positive, got {min_sigma}"));
        }
        let kl = ((d.mu.sqr()? + d.sigma.sqr()?)? - d.sigma.log()?.affine(2.0, 1.0)?)?
            .affine(0.5, 0.0)?
            .mean_all()?
            .affine(w, 0.0)?;
        total = Some(match total {
            Some(t) => (t + kl)?,
            None => kl,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(invalid!("kl_loss needs at least one distribution")),
    }
}
