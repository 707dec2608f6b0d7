//! Named parameter storage with deterministic, order-independent init.
//!
//! Every parameter draws its initial values from a ChaCha8 stream seeded by
//! `(seed, name)`, so two models that share a parameter name and shape get
//! identical values no matter which other parameters they construct.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `N(0, std^2)`.
    Normal(f64),
    /// He-normal for a fan-in, scaled by `gain`.
    Kaiming { fan_in: usize, gain: f64 },
}

impl Init {
    fn values(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
            Init::Kaiming { fan_in, gain } => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                Init::Normal(std).values(n, rng)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// All parameters and persistent buffers of one network, keyed by
/// dot-separated names.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Entry>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable parameter variables, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Frozen parameter variables, sorted by name.
    pub fn frozen(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|e| &e.var)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    /// Number of scalar parameters (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|e| e.var.elem_count()).sum()
    }

    /// Parameter shapes by name, used to compare model assemblies.
    pub fn manifest(&self) -> BTreeMap<String, Vec<usize>> {
        self.params
            .iter()
            .map(|(n, e)| (n.clone(), e.var.dims().to_vec()))
            .collect()
    }

    /// Parameters and buffers together, for serialization.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .chain(
                self.buffers
                    .iter()
                    .map(|(n, v)| (n.clone(), v.as_tensor().clone())),
            )
            .collect()
    }

    /// Overwrites a parameter or buffer in place; shapes must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .map(|e| &e.var)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if var.dims() != value.dims() {
            return Err(invalid!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            ));
        }
        var.set(&value.to_dtype(self.dtype)?.contiguous()?)?;
        Ok(())
    }

    /// Copies every tensor of `other` whose name starts with `prefix`.
    /// Missing names or shape mismatches are errors.
    pub fn load_prefix(&self, other: &BTreeMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for name in self.params.keys().chain(self.buffers.keys()) {
            if !name.starts_with(prefix) {
                continue;
            }
            let t = other
                .get(name)
                .ok_or_else(|| invalid!("checkpoint lacks {name}"))?;
            self.set(name, t)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

struct BuildState {
    store: ParamStore,
    seed: u64,
}

/// Hierarchical builder that registers parameters into a [`ParamStore`].
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuildState>>,
    prefix: String,
    trainable: bool,
}

impl ParamBuilder {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuildState {
                store: ParamStore::new(dtype, device),
                seed,
            })),
            prefix: String::new(),
            trainable: true,
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            state: self.state.clone(),
            prefix,
            trainable: self.trainable,
        }
    }

    /// Parameters created under the returned builder are excluded from
    /// training: layers receive detached handles, so no gradient reaches them.
    pub fn frozen(&self) -> Self {
        Self {
            trainable: false,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().store.dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().store.device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn make_var(&self, name: &str, shape: &[usize], init: Init) -> Result<(String, Var)> {
        let full = self.full_name(name);
        let st = self.state.borrow();
        let mut rng = ChaCha8Rng::seed_from_u64(st.seed ^ name_hash(&full));
        let n = shape.iter().product();
        let values = init.values(n, &mut rng);
        let t = Tensor::from_vec(values, shape, &st.store.device)?.to_dtype(st.store.dtype)?;
        Ok((full, Var::from_tensor(&t)?))
    }

    /// Registers a parameter and returns the handle layers should compute with.
    pub fn tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let (full, var) = self.make_var(name, shape, init)?;
        let handle = if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        let mut st = self.state.borrow_mut();
        if st.store.params.contains_key(&full) || st.store.buffers.contains_key(&full) {
            return Err(invalid!("parameter {full} registered twice"));
        }
        st.store.params.insert(
            full,
            Entry {
                var,
                trainable: self.trainable,
            },
        );
        Ok(handle)
    }

    /// Registers non-trainable persistent state (e.g. power-iteration vectors).
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let (full, var) = self.make_var(name, shape, init)?;
        let mut st = self.state.borrow_mut();
        if st.store.params.contains_key(&full) || st.store.buffers.contains_key(&full) {
            return Err(invalid!("buffer {full} registered twice"));
        }
        st.store.buffers.insert(full, var.clone());
        Ok(var)
    }

    /// Snapshot of everything registered so far (variables are shared).
    pub fn store(&self) -> ParamStore {
        self.state.borrow().store.clone()
    }
}

/// FNV-1a, used to derive per-parameter seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
