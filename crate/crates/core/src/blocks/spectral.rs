use candle_core::{Result, Tensor, Var};

use crate::params::{Init, ParamBuilder};

/// Persistent left singular-vector estimate for power iteration.
#[derive(Debug, Clone)]
pub struct SpectralState {
    u: Var,
}

impl SpectralState {
    pub fn new(pb: &ParamBuilder, rows: usize) -> crate::Result<Self> {
        let u = pb.buffer("sn_u", &[rows], Init::Normal(1.0))?;
        Ok(Self { u })
    }

    pub fn from_var(u: Var) -> Self {
        Self { u }
    }

    pub fn u(&self) -> Vec<f64> {
        self.u
            .as_tensor()
            .to_dtype(candle_core::DType::F64)
            .and_then(|t| t.to_vec1())
            .unwrap_or_default()
    }

    fn store(&self, u: &[f64]) -> Result<()> {
        let t = Tensor::from_slice(u, u.len(), self.u.device())?.to_dtype(self.u.dtype())?;
        self.u.set(&t)
    }

    /// `W / sigma` with sigma estimated from the current state, without
    /// advancing the iteration.
    pub fn normalize_frozen(&self, w: &Tensor) -> Result<Tensor> {
        let u = unit_or(self.u(), None);
        let host = host_matrix(w)?;
        let v = unit_or(mat_t_vec(&host, &u), None);
        divide_by_sigma(w, &u, &v)
    }
}

struct HostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn host_matrix(w: &Tensor) -> Result<HostMatrix> {
    let (rows, cols) = w.dims2()?;
    let data = w.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(HostMatrix { rows, cols, data })
}

fn mat_vec(m: &HostMatrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows)
        .map(|r| {
            m.data[r * m.cols..(r + 1) * m.cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn mat_t_vec(m: &HostMatrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for (r, &ur) in u.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&m.data[r * m.cols..(r + 1) * m.cols]) {
            *o += a * ur;
        }
    }
    out
}

/// Normalizes `x`; a (near-)zero vector falls back to `prev`, or stays as is.
fn unit_or(x: Vec<f64>, prev: Option<&[f64]>) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > super::SN_EPS {
        x.into_iter().map(|v| v / n).collect()
    } else {
        prev.map(<[f64]>::to_vec).unwrap_or(x)
    }
}

fn divide_by_sigma(w: &Tensor, u: &[f64], v: &[f64]) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    let dev = w.device();
    let ut = Tensor::from_slice(u, (1, rows), dev)?.to_dtype(w.dtype())?;
    let vt = Tensor::from_slice(v, (cols, 1), dev)?.to_dtype(w.dtype())?;
    // sigma keeps the graph through W; u and v are constants.
    let sigma = ut.matmul(w)?.matmul(&vt)?.reshape(())?;
    let sigma = sigma.maximum(super::SN_EPS)?;
    w.broadcast_div(&sigma)
}

/// Divides a `(rows, cols)` weight matrix by its largest singular value,
/// estimated with `iters` power-iteration steps that start from and update
/// `state`. A zero matrix stays zero.
pub fn spectral_normalize(w: &Tensor, iters: usize, state: &SpectralState) -> Result<Tensor> {
    assert!(iters >= 1, "spectral_normalize needs at least one iteration");
    let host = host_matrix(w)?;
    let mut u = unit_or(state.u(), None);
    let mut v = vec![0.0; host.cols];
    for _ in 0..iters {
        v = unit_or(mat_t_vec(&host, &u), Some(&v));
        u = unit_or(mat_vec(&host, &v), Some(&u));
    }
    state.store(&u)?;
    divide_by_sigma(w, &u, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use candle_core::{DType, Device};

    fn state(rows: usize) -> SpectralState {
        let pb = ParamBuilder::new(DType::F64, &Device::Cpu, 4);
        SpectralState::new(&pb, rows).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::new(&[[2.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let out: Vec<Vec<f64>> = spectral_normalize(&w, 20, &state(2)).unwrap().to_vec2().unwrap();
        let expected = [[1.0, 0.0], [0.0, 0.5]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((out[r][c] - expected[r][c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn identity_is_unchanged() {
        let w = Tensor::eye(5, DType::F64, &Device::Cpu).unwrap();
        let out = spectral_normalize(&w, 20, &state(5)).unwrap();
        let d: f64 = (out - &w).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let w = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        let st = state(3);
        let before = st.u();
        let out = spectral_normalize(&w, 5, &st).unwrap();
        assert_eq!(out.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(st.u().iter().all(|v| v.is_finite()));
        assert_eq!(st.u().len(), before.len());
    }

    #[test]
    fn state_is_updated_and_frozen_route_matches() {
        let w = Tensor::new(&[[3.0f64, 1.0], [1.0, 2.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let st = state(3);
        let before = st.u();
        let a = spectral_normalize(&w, 30, &st).unwrap();
        assert_ne!(before, st.u());
        let b = st.normalize_frozen(&w).unwrap();
        let d: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-9);
    }
}
