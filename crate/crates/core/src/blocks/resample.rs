use candle_core::{DType, Device, Result, Tensor};

/// Row-stochastic `(n_in * factor) × n_in` matrix of align-corners-false
/// bilinear weights along one axis.
pub fn interpolation_matrix(n_in: usize, factor: usize) -> Vec<f64> {
    let n_out = n_in * factor;
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

fn matrix(n_in: usize, factor: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_vec(interpolation_matrix(n_in, factor), (n_in * factor, n_in), device)?
        .to_dtype(dtype)
}

/// Bilinear upsampling by an integer factor, expressed as two matrix
/// products so it stays differentiable.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    assert!(factor >= 2, "upsampling factor must be at least 2");
    let (b, c, h, w) = x.dims4()?;
    let rows = matrix(h, factor, x.dtype(), x.device())?;
    let cols_t = matrix(w, factor, x.dtype(), x.device())?.t()?;
    // (B,C,H,W) x (W,W') -> (B,C,H,W')
    let x = x.broadcast_matmul(&cols_t)?;
    // (H',H) x (B,C,H,W') -> (B,C,H',W')
    rows.broadcast_as((b, c, h * factor, h))?
        .contiguous()?
        .matmul(&x.contiguous()?)
}
