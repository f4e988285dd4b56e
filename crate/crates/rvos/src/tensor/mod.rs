//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array of `f64` scalars. Axis order
//! is channel-first throughout the crate: feature maps are `(C, H, W)`, token
//! matrices are `(rows, C)`, scalars are rank 0. Every operation that touches
//! a tensor requiring gradients records a node in a dynamic graph held by
//! `Arc` links between outputs and their parents; [`Tensor::backward`] walks
//! that graph once in reverse topological order and returns per-leaf
//! gradients. Two invariants hold everywhere:
//!
//! * the product of the shape equals the data length, and
//! * every stored scalar is finite — operations that would produce NaN or
//!   infinity fail with [`Error::NonFinite`] instead.
//!
//! Recording can be suspended with [`no_grad`], which makes forward passes
//! allocation-light for inference, matching-cost evaluation and finite
//! differences.

mod fft;
mod gradcheck;
mod io;
mod ops;
mod store;

pub use fft::{fft2, ifft2, ifft2_real, Spectrum, IMAG_RESIDUE_LIMIT};
pub use gradcheck::{grad_check, grad_check_sampled, GRAD_CHECK_EPSILON};
pub use io::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor};
pub use ops::{avg_pool2, concat_channels, conv1x1, patch_conv, resize_bilinear, select_rows, sorted_sum};
pub use store::{Init, ParamStore, Params, StoreView};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on the current thread.
///
/// Values computed inside the closure carry no graph, so they are cheap to
/// build and drop. Recording is restored even if the closure panics.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            RECORDING.with(|r| r.set(self.0));
        }
    }
    let _guard = RECORDING.with(|r| {
        let prev = r.get();
        r.set(false);
        Guard(prev)
    });
    f()
}

pub(crate) fn recording_enabled() -> bool {
    RECORDING.with(|r| r.get())
}

/// Backward function of one recorded operation.
///
/// Receives the gradient with respect to the node output and a slot per
/// parent; it fills `Some(contribution)` for every parent that needs a
/// gradient and leaves the rest `None`. Contributions are dense and have the
/// parent's element count.
type BackwardFn = Box<dyn Fn(&[f64], &mut [Option<Vec<f64>>]) + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Immutable dense array of `f64` with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("recorded", &self.inner.grad_fn.is_some())
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Builds a constant (non-learnable) tensor, validating shape and
    /// finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel_of(shape),
                    data.len()
                ),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    /// Builds a leaf tensor that participates in gradient computation.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::new_inner(t.inner.shape.clone(), t.inner.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_inner(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Self::from_vec(shape, vec![value; numel_of(shape)])
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::from_vec(&[], vec![value])
    }

    /// Internal constructor for operation outputs. Records a graph node only
    /// when recording is enabled and at least one parent needs gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let record = recording_enabled() && parents.iter().any(|p| p.needs_grad());
        let grad_fn = record.then(|| GradFn { parents, backward });
        Ok(Self::new_inner(shape, data, false, grad_fn))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Numeric(format!(
                "item() requires exactly one element, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> usize {
        self.inner.id
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.grad_fn.is_some()
    }

    /// Same values as `self`, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new_inner(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Maximum absolute difference to another tensor of identical shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Exact bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Reverse-mode differentiation from a scalar output.
    ///
    /// Walks the recorded graph once and returns gradients for every leaf
    /// tensor created with [`Tensor::parameter`] that the output depends on.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar output, shape is {:?}",
                self.shape()
            )));
        }

        // Post-order DFS: every node is appended after all of its parents,
        // so the reversed order processes consumers before producers.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        visited.insert(self.id());
        stack.push((self.clone(), 0));
        while let Some((node, child)) = stack.last_mut() {
            let parents = node.inner.grad_fn.as_ref().map(|g| &g.parents);
            let next = parents.and_then(|ps| ps.get(*child)).cloned();
            match next {
                Some(p) => {
                    *child += 1;
                    if p.inner.grad_fn.is_some() || p.requires_grad() {
                        if visited.insert(p.id()) {
                            stack.push((p, 0));
                        }
                    }
                }
                None => {
                    let (node, _) = stack.pop().expect("stack non-empty");
                    topo.push(node);
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in topo.iter().rev() {
            let Some(grad_out) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(gf) = node.inner.grad_fn.as_ref() {
                let mut slots: Vec<Option<Vec<f64>>> = vec![None; gf.parents.len()];
                (gf.backward)(&grad_out, &mut slots);
                for (parent, slot) in gf.parents.iter().zip(slots) {
                    if let Some(contrib) = slot {
                        debug_assert_eq!(contrib.len(), parent.numel());
                        let acc = grads
                            .entry(parent.id())
                            .or_insert_with(|| vec![0.0; parent.numel()]);
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                }
            }
            if node.requires_grad() {
                // Leaves keep their accumulated gradient for the caller.
                grads.insert(node.id(), grad_out);
            }
        }

        // Retain only gradients of actual leaves.
        let mut map = HashMap::new();
        for node in &topo {
            if node.requires_grad() {
                if let Some(g) = grads.remove(&node.id()) {
                    map.insert(node.id(), g);
                }
            }
        }
        for g in map.values() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { map })
    }
}

/// Per-leaf gradients produced by [`Tensor::backward`], keyed by tensor
/// identity.
pub struct Gradients {
    map: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&[f64]> {
        self.map.get(&leaf.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_must_agree() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn rank_zero_scalar_holds_one_element() {
        let s = Tensor::scalar(4.25).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 4.25);
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let err = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let p = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = p.mul(&p).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_accumulates_through_shared_subgraphs() {
        // y = (p*p) + (p*p) reuses the same intermediate twice: dy/dp = 4p.
        let p = Tensor::parameter(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let sq = p.mul(&p).unwrap();
        let y = sq.add(&sq).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        let g = grads.get(&p).unwrap();
        for (gi, pi) in g.iter().zip(p.data()) {
            assert!((gi - 4.0 * pi).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let p = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| p.mul(&p).unwrap().sum_all().unwrap());
        assert!(y.backward().is_err() || y.backward().unwrap().get(&p).is_none());
    }

    #[test]
    fn detach_cuts_the_graph() {
        let p = Tensor::parameter(&[2], vec![3.0, 4.0]).unwrap();
        let y = p.mul(&p).unwrap().detach().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(&p).is_none());
    }

    #[test]
    fn constants_do_not_build_graph_nodes() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = a.mul(&b).unwrap();
        assert!(c.inner.grad_fn.is_none());
    }
}
