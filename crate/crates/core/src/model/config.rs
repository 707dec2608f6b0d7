use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation ladder: each variant adds one mechanism to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Encoder and decoder only.
    #[serde(rename = "base")]
    Base,
    /// Adds memory queries with standard-normal noise and a fixed embedding.
    #[serde(rename = "gm-bm")]
    GmBm,
    /// Adds conditional stochastic variation.
    #[serde(rename = "gm-csv")]
    GmCsv,
    /// Adds progressive embedding-pool updates.
    #[serde(rename = "gm-srm")]
    GmSrm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::GmBm, Variant::GmCsv, Variant::GmSrm];

    pub fn uses_memory(self) -> bool {
        self != Variant::Base
    }

    pub fn conditional_noise(self) -> bool {
        matches!(self, Variant::GmCsv | Variant::GmSrm)
    }

    pub fn progressive(self) -> bool {
        self == Variant::GmSrm
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::GmBm => "gm-bm",
            Variant::GmCsv => "gm-csv",
            Variant::GmSrm => "gm-srm",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of scales; the encoder has `n_scales - 1` blocks and the
    /// decoder as many.
    pub n_scales: usize,
    pub base_channels: usize,
    /// Latent embedding length.
    pub d_c: usize,
    pub image_side: usize,
    pub image_channels: usize,
    pub variant: Variant,
    /// Upper bound for per-level channel widths.
    pub max_channels: usize,
    /// Conv width inside the embedding mapping.
    pub embed_hidden: usize,
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_scales: 4,
            base_channels: 32,
            d_c: 512,
            image_side: 64,
            image_channels: 3,
            variant: Variant::GmSrm,
            max_channels: 256,
            embed_hidden: 64,
            ca_reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_scales < 2 {
            return fail(format!("n_scales must be >= 2, got {}", self.n_scales));
        }
        if self.n_scales >= usize::BITS as usize || self.image_side % (1 << self.n_scales) != 0 {
            return fail(format!(
                "image_side {} must be divisible by 2^{}",
                self.image_side, self.n_scales
            ));
        }
        if self.base_channels == 0
            || self.d_c == 0
            || self.image_channels == 0
            || self.embed_hidden == 0
            || self.max_channels == 0
        {
            return fail("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Number of pyramid levels (= encoder blocks = decoder blocks).
    pub fn n_levels(&self) -> usize {
        self.n_scales - 1
    }

    /// Channel width of pyramid level `k` (0 = finest).
    pub fn level_width(&self, k: usize) -> usize {
        (self.base_channels << k.min(16)).min(self.max_channels)
    }

    /// Spatial side of pyramid level `k`: `image_side / 2^(k+1)`.
    pub fn level_side(&self, k: usize) -> usize {
        self.image_side >> (k + 1)
    }

    /// Pyramid level visited at decoder step `j` (0 = coarsest step).
    pub fn level_of_step(&self, j: usize) -> usize {
        self.n_levels() - 1 - j
    }

    /// Output width of decoder step `j`.
    pub fn decoder_out_width(&self, j: usize) -> usize {
        let k = self.level_of_step(j);
        if k == 0 {
            self.base_channels
        } else {
            self.level_width(k - 1)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}
