//! Named parameter storage, initialization, and optimization.
//!
//! All trainable state lives in a [`ParamStore`]: an ordered map from
//! parameter name to leaf tensor. Models are thin views that fetch (or
//! lazily create) their parameters by name, so two models built over the
//! same store share weights, and rebuilding a model after an optimizer step
//! picks up the updated values.
//!
//! Initialization is derived from the parameter *name* (plus a store
//! namespace and seed), not from creation order. Adding or removing one
//! parameter therefore never changes how any other parameter starts, which
//! keeps ablations comparable: shared layers start identical whether or not
//! an optional stage is enabled.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// How a parameter is filled on first creation.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform over `[lo, hi)`.
    Uniform(f64, f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// Explicit values; the length must match the shape.
    Literal(Vec<f64>),
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGK1";

/// 64-bit FNV-1a over the namespace and name, mixed with the store seed.
fn param_seed(namespace: &[u8], seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in namespace.iter().chain(name.as_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

/// Standard normal sample via the Box-Muller transform.
fn normal_sample(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub struct ParamStore {
    namespace: Vec<u8>,
    seed: u64,
    params: BTreeMap<String, Tensor>,
    /// SGD velocity per parameter, created on the first step that sees it.
    velocity: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new(namespace: &[u8], seed: u64) -> Self {
        ParamStore {
            namespace: namespace.to_vec(),
            seed,
            params: BTreeMap::new(),
            velocity: BTreeMap::new(),
        }
    }

    /// Fetches `name`, creating it with `init` if absent. An existing
    /// parameter must match the requested shape.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(existing) = self.params.get(name) {
            if existing.shape() != shape {
                return Err(Error::Shape {
                    op: "param_init",
                    detail: format!(
                        "parameter {name} exists with shape {:?}, requested {:?}",
                        existing.shape(),
                        shape
                    ),
                });
            }
            return Ok(existing.clone());
        }
        let n = super::numel_of(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform(lo, hi) => {
                if !(lo < hi) {
                    return Err(Error::Numeric(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha20Rng::seed_from_u64(param_seed(&self.namespace, self.seed, name));
                (0..n).map(|_| rng.gen_range(lo..hi)).collect()
            }
            Init::Normal(std) => {
                if !(std > 0.0) {
                    return Err(Error::Numeric(format!(
                        "normal init needs a positive std, got {std}"
                    )));
                }
                let mut rng = ChaCha20Rng::seed_from_u64(param_seed(&self.namespace, self.seed, name));
                (0..n).map(|_| std * normal_sample(&mut rng)).collect()
            }
            Init::Literal(values) => {
                if values.len() != n {
                    return Err(Error::Shape {
                        op: "param_init",
                        detail: format!(
                            "literal init for {name}: {} values for shape {:?}",
                            values.len(),
                            shape
                        ),
                    });
                }
                values
            }
        };
        let t = Tensor::parameter(shape, data)?;
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Fetches an existing parameter.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Number of parameters (tensors, not elements).
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// One SGD step with momentum. Parameters the gradient map does not
    /// cover receive a zero gradient (their velocity still decays). Returns
    /// the global gradient L2 norm, a cheap training-health signal.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<f64> {
        self.sgd_step_clipped(grads, lr, momentum, 0.0)
    }

    /// [`ParamStore::sgd_step`] with global-norm gradient clipping: when
    /// the overall gradient L2 norm exceeds `max_norm`, every gradient is
    /// scaled down to that norm before entering the velocity. `max_norm`
    /// of zero disables clipping. The returned norm is the unclipped one.
    pub fn sgd_step_clipped(
        &mut self,
        grads: &Gradients,
        lr: f64,
        momentum: f64,
        max_norm: f64,
    ) -> Result<f64> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        let mut sq_norm = 0.0;
        for name in &names {
            let current = self.params.get(name).expect("listed name");
            if let Some(g) = grads.get(current) {
                for gv in g {
                    sq_norm += gv * gv;
                }
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if max_norm > 0.0 && norm > max_norm {
            max_norm / norm
        } else {
            1.0
        };
        for name in names {
            let current = self.params.get(&name).expect("listed name").clone();
            let n = current.numel();
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            if vel.len() != n {
                return Err(Error::Numeric(format!(
                    "velocity for {name} has stale length {} (expected {n})",
                    vel.len()
                )));
            }
            let grad = grads.get(&current);
            let mut data = current.data().to_vec();
            for i in 0..n {
                let g = scale * grad.map_or(0.0, |g| g[i]);
                vel[i] = momentum * vel[i] + g;
                data[i] -= lr * vel[i];
            }
            let updated = Tensor::parameter(current.shape(), data)?;
            self.params.insert(name, updated);
        }
        Ok(norm)
    }

    /// A copy of this store with one element of one parameter shifted by
    /// `delta` — the probe used by finite-difference gradient checks.
    /// Velocity state is not copied.
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> Result<ParamStore> {
        let target = self.get(name)?;
        if index >= target.numel() {
            return Err(Error::Shape {
                op: "perturb",
                detail: format!("index {index} out of {} elements of {name}", target.numel()),
            });
        }
        let mut params = self.params.clone();
        let mut data = target.data().to_vec();
        data[index] += delta;
        params.insert(name.to_string(), Tensor::parameter(target.shape(), data)?);
        Ok(ParamStore {
            namespace: self.namespace.clone(),
            seed: self.seed,
            params,
            velocity: BTreeMap::new(),
        })
    }

    /// Serializes every parameter (f64, exact) plus a caller-supplied
    /// metadata string into one checkpoint file. Optimizer velocity is
    /// deliberately not saved: checkpoints feed inference and evaluation.
    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let meta_bytes = meta.as_bytes();
        out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_bytes);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]; returns the store
    /// and the stored metadata string. Round-tripped values are bit-exact.
    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let bytes = fs::read(path)?;
        let mut cursor = Cursor::new(&bytes);
        let magic = cursor.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let meta_len = cursor.u32()? as usize;
        let meta = String::from_utf8(cursor.take(meta_len)?.to_vec())
            .map_err(|e| Error::Format(format!("checkpoint metadata is not UTF-8: {e}")))?;
        let count = cursor.u32()? as usize;
        let mut store = ParamStore::new(b"checkpoint", 0);
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?;
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let n = super::numel_of(&shape);
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = cursor.take(8)?;
                data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
            }
            if store.params.contains_key(&name) {
                return Err(Error::Format(format!("duplicate parameter {name} in checkpoint")));
            }
            store.params.insert(name, Tensor::parameter(&shape, data)?);
        }
        if !cursor.at_end() {
            return Err(Error::Format(format!(
                "trailing bytes after checkpoint payload in {}",
                path.display()
            )));
        }
        Ok((store, meta))
    }

    /// Fetch-only view for rebuilding models without mutation rights.
    pub fn view(&self) -> StoreView<'_> {
        StoreView { inner: self }
    }
}

/// Common interface for building parameter structs. A mutable store creates
/// missing parameters; a [`StoreView`] only fetches and errors on anything
/// absent. Constructors written against this trait can therefore be reused
/// verbatim inside gradient-check closures, where silently creating a fresh
/// parameter would hide it from the finite-difference probe.
pub trait Params {
    /// Fetches `name`, creating it with `init` where the backend allows.
    fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;

    /// Fetches an existing parameter.
    fn get(&self, name: &str) -> Result<Tensor>;
}

impl Params for ParamStore {
    fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        ParamStore::init(self, name, shape, init)
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        ParamStore::get(self, name)
    }
}

/// Read-only handle over a [`ParamStore`]; `init` degenerates to a
/// shape-checked fetch.
pub struct StoreView<'a> {
    inner: &'a ParamStore,
}

impl Params for StoreView<'_> {
    fn init(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self.inner.get(name)?;
        if t.shape() != shape {
            return Err(Error::Shape {
                op: "param_view",
                detail: format!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    t.shape(),
                    shape
                ),
            });
        }
        Ok(t)
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        self.inner.get(name)
    }
}

/// Minimal byte reader with truncation checks.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated payload: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.at == self.bytes.len()
    }
}
