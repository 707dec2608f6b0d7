use candle_core::{Result, Tensor};

use crate::params::{Init, ParamBuilder};

/// Style-modulated convolution with optional weight demodulation.
///
/// For a style `s` the effective weight is `w'[o,i] = w[o,i] * s[i]`; with
/// demodulation each output filter is rescaled to
/// `w'[o] / sqrt(sum_{i,k,k} w'[o]^2 + eps)`. The batched forward applies
/// the style to the activations and the demodulation to the output, which
/// is algebraically the same as convolving every sample with its own
/// modulated weight.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    weight: Tensor,
    padding: usize,
    demodulate: bool,
    eps: f64,
}

impl ModulatedConv {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        demodulate: bool,
    ) -> crate::Result<Self> {
        assert!(kernel % 2 == 1, "conv kernels are odd");
        // Unit-variance weights; the fan-in gain is folded in at runtime so
        // undemodulated layers (to-RGB) keep unit-scale activations.
        let weight = pb.tensor("weight", &[c_out, c_in, kernel, kernel], Init::Normal(1.0))?;
        Ok(Self::from_weight(weight, demodulate))
    }

    pub fn from_weight(weight: Tensor, demodulate: bool) -> Self {
        let k = weight.dims()[2];
        Self {
            weight,
            padding: k / 2,
            demodulate,
            eps: super::DEMOD_EPS,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    fn fan_in_gain(&self) -> f64 {
        let d = self.weight.dims();
        1.0 / ((d[1] * d[2] * d[3]) as f64).sqrt()
    }

    fn base_weight(&self) -> Result<Tensor> {
        if self.demodulate {
            // Demodulation cancels any constant gain.
            Ok(self.weight.clone())
        } else {
            self.weight.affine(self.fan_in_gain(), 0.0)
        }
    }

    /// Effective `(C_out, C_in, k, k)` weight for a single style vector `(C_in,)`.
    pub fn modulated_weight(&self, style: &Tensor) -> Result<Tensor> {
        let c_in = self.in_channels();
        let w = self
            .base_weight()?
            .broadcast_mul(&style.reshape((1, c_in, 1, 1))?)?;
        if !self.demodulate {
            return Ok(w);
        }
        let norm = (w.sqr()?.sum_keepdim((1, 2, 3))? + self.eps)?.sqrt()?;
        w.broadcast_div(&norm)
    }

    /// `x`: `(B, C_in, H, W)`, `style`: `(B, C_in)`.
    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, c_in, _, _) = x.dims4()?;
        let weight = self.base_weight()?;
        let xs = x.broadcast_mul(&style.reshape((b, c_in, 1, 1))?)?;
        let y = xs.conv2d(&weight, self.padding, 1, 1, 1)?;
        if !self.demodulate {
            return Ok(y);
        }
        // sum_{i,k} (w[o,i,k] s[b,i])^2 = sum_i s[b,i]^2 * sum_k w[o,i,k]^2
        let w_sq = weight.sqr()?.sum((2, 3))?; // (C_out, C_in)
        let energy = style.sqr()?.matmul(&w_sq.t()?)?; // (B, C_out)
        let demod = (energy + self.eps)?.sqrt()?.recip()?;
        let c_out = demod.dim(1)?;
        y.broadcast_mul(&demod.reshape((b, c_out, 1, 1))?)
    }
}
