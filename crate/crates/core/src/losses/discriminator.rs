use candle_core::Tensor;

use crate::blocks::{leaky_relu, spectral_normalize, Conv2d, SpectralState};
use crate::params::{ParamBuilder, ParamStore};
use crate::Result;

/// How a discriminator pass treats its spectral-norm state and weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnMode {
    /// One power-iteration step per layer; gradients reach the weights.
    Train,
    /// Current estimates only; weights are detached (generator updates and
    /// gradient checks).
    Frozen,
}

/// Scores images; higher means "more real".
pub trait Critic {
    fn score(&self, x: &Tensor) -> Result<Tensor>;
}

/// Four spectrally normalized stride-2 convolutions with LeakyReLU(0.2),
/// producing a one-channel patch map. It does not see the mask.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<(Conv2d, SpectralState)>,
    store: ParamStore,
}

impl Discriminator {
    pub const DEPTH: usize = 4;

    pub fn new(pb: &ParamBuilder, image_channels: usize, base_channels: usize) -> Result<Self> {
        let widths = [base_channels, base_channels * 2, base_channels * 4, 1];
        let mut layers = Vec::with_capacity(Self::DEPTH);
        let mut c_in = image_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            let p = pb.pp(format!("layer{i}"));
            let conv = Conv2d::new(&p, c_in, c_out, 3, 2, true)?;
            let state = SpectralState::new(&p, c_out)?;
            layers.push((conv, state));
            c_in = c_out;
        }
        Ok(Self {
            layers,
            store: pb.store(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn normalized_weight(&self, i: usize, mode: SnMode) -> Result<Tensor> {
        let (conv, state) = &self.layers[i];
        let w = match mode {
            SnMode::Train => conv.weight().clone(),
            SnMode::Frozen => conv.weight().detach(),
        };
        let dims = w.dims4()?;
        let mat = w.reshape((dims.0, dims.1 * dims.2 * dims.3))?;
        let normalized = match mode {
            SnMode::Train => spectral_normalize(&mat, 1, state)?,
            SnMode::Frozen => state.normalize_frozen(&mat)?,
        };
        Ok(normalized.reshape(dims)?)
    }

    /// Spectrally normalized weight matrices `(C_out, C_in*k*k)` as used by
    /// the next frozen pass.
    pub fn normalized_matrices(&self) -> Result<Vec<Tensor>> {
        (0..self.layers.len())
            .map(|i| {
                let w = self.normalized_weight(i, SnMode::Frozen)?;
                let (o, c, kh, kw) = w.dims4()?;
                Ok(w.reshape((o, c * kh * kw))?)
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: SnMode) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (conv, _)) in self.layers.iter().enumerate() {
            let w = self.normalized_weight(i, mode)?;
            let y = match mode {
                SnMode::Train => conv.forward_with_weight(&h, &w)?,
                SnMode::Frozen => conv.detached().forward_with_weight(&h, &w)?,
            };
            h = if i == last { y } else { leaky_relu(&y, 0.2)? };
        }
        Ok(h)
    }

    pub fn critic(&self, mode: SnMode) -> DiscriminatorCritic<'_> {
        DiscriminatorCritic { d: self, mode }
    }
}

pub struct DiscriminatorCritic<'a> {
    d: &'a Discriminator,
    mode: SnMode,
}

impl Critic for DiscriminatorCritic<'_> {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.d.forward(x, self.mode)
    }
}
