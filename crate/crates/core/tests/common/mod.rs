//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use gmsrm::imaging::ImageTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Uniform::new(lo, hi).unwrap();
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(t: &Tensor) -> Var {
    Var::from_tensor(t).unwrap()
}

/// Smooth procedural test image `i` in `[-0.9, 0.9]`.
pub fn procedural_image(i: usize, side: usize) -> ImageTensor {
    let f = i as f32;
    ImageTensor::from_fn(3, side, side, |c, y, x| {
        let (u, v) = (x as f32 / side as f32, y as f32 / side as f32);
        let a = (6.0 * u + 1.3 * f + c as f32).sin();
        let b = (4.0 * v * (1.0 + 0.2 * f) + 0.5 * c as f32).cos();
        0.9 * (0.6 * a * b + 0.4 * ((u - 0.5) * (v - 0.3) * 8.0 + f).sin())
    })
    .unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

/// Compares autograd gradients of the scalar `f()` with central differences
/// for every variable in `vars`. At most `per_tensor` entries of each
/// variable are probed, spread evenly. The error is
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all probes.
pub fn grad_check(name: &str, vars: &[&Var], per_tensor: usize, f: impl Fn() -> Tensor) -> GradCheck {
    let h = 1e-6;
    let loss = f();
    let grads = loss.backward().unwrap();
    let (mut diff, mut an, mut nn, mut checked) = (0.0, 0.0, 0.0, 0);
    for v in vars {
        let g = grads
            .get(v.as_tensor())
            .map(values)
            .unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base = values(v.as_tensor());
        let n = base.len();
        let stride = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_tensor) {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, v.dims(), &Device::Cpu).unwrap()).unwrap();
                values(&f())[0]
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            diff += (g[i] - num).powi(2);
            an += g[i] * g[i];
            nn += num * num;
            checked += 1;
        }
        v.set(&Tensor::from_vec(base, v.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let denom = an.sqrt().max(nn.sqrt());
    let rel_err = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
    GradCheck { name: name.to_string(), rel_err, checked }
}

/// `sum(out * r)` for a fixed random projection `r`, turning a tensor-valued
/// map into a scalar with a dense gradient.
pub fn project(out: &Tensor, seed: u64) -> Tensor {
    let r = randn(out.dims(), seed).to_dtype(out.dtype()).unwrap();
    (out * r).unwrap().sum_all().unwrap()
}
