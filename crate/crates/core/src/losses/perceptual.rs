use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::blocks::Conv2d;
use crate::checkpoint::Container;
use crate::error::{invalid, Result};
use crate::params::ParamBuilder;

/// Maps an image batch to a list of feature maps, one per layer.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Identity "extractor": the image itself is the single feature layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Frozen stack of ReLU convolutions; every layer's activation is a
/// feature map.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    layers: Vec<Conv2d>,
}

impl ConvFeatureExtractor {
    pub const DEFAULT_SEED: u64 = 0x0f3a_7ce5;
    const WIDTHS: [usize; 3] = [16, 32, 64];
    const STRIDES: [usize; 3] = [1, 2, 2];

    /// Deterministic three-layer stand-in for a pretrained network.
    pub fn seeded(image_channels: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let pb = ParamBuilder::new(dtype, device, seed).frozen();
        let mut layers = Vec::new();
        let mut c_in = image_channels;
        for (i, (&w, &s)) in Self::WIDTHS.iter().zip(&Self::STRIDES).enumerate() {
            layers.push(Conv2d::new(&pb.pp(format!("layer{i}")), c_in, w, 3, s, true)?);
            c_in = w;
        }
        Ok(Self { layers })
    }

    pub fn default_for(image_channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::seeded(image_channels, Self::DEFAULT_SEED, dtype, device)
    }

    /// Loads external weights from a `GMSRM1` container of kind
    /// `feature-extractor`: tensors `layer{i}.weight` `(C_out, C_in, k, k)`
    /// and `layer{i}.bias` `(C_out,)`, plus `meta.strides` listing each
    /// layer's stride.
    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let c = Container::read(path)?;
        if c.header.kind != "feature-extractor" {
            return Err(invalid!("expected a feature-extractor file, got {}", c.header.kind));
        }
        let strides: Vec<usize> = serde_json::from_value(
            c.header
                .meta
                .get("strides")
                .cloned()
                .ok_or_else(|| invalid!("feature-extractor file lacks meta.strides"))?,
        )?;
        let tensors = c.tensors(device)?;
        let mut layers = Vec::new();
        for (i, &s) in strides.iter().enumerate() {
            let w = tensors
                .get(&format!("layer{i}.weight"))
                .ok_or_else(|| invalid!("missing layer{i}.weight"))?
                .to_dtype(dtype)?;
            let b = tensors
                .get(&format!("layer{i}.bias"))
                .map(|b| b.to_dtype(dtype))
                .transpose()?;
            layers.push(Conv2d::from_parts(w, b, s));
        }
        Ok(Self { layers })
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `sum_l ||f_l(pred) - f_l(gt)||_1 / (C_l H_l W_l)`, averaged over the batch.
pub fn perceptual_loss(pred: &Tensor, gt: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(invalid!("prediction {:?} and target {:?} differ", pred.dims(), gt.dims()));
    }
    let fp = fx.features(pred)?;
    let fg = fx.features(&gt.detach())?;
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
    for (a, b) in fp.iter().zip(&fg) {
        total = (total + (a - b)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}
