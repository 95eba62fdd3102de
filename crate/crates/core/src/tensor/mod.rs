//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on
//! tensors that track gradients record a backward closure together with
//! their parents; [`Tensor::backward`] sweeps the recorded graph in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Broadcasting follows trailing-dimension alignment: shapes are compared
//! from the last axis backwards and an extent of 1 (or a missing leading
//! axis) stretches to match the other operand.

mod conv;
mod element;
pub mod gradcheck;
mod linalg;
pub mod opnt;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

pub use conv::ConvSpec;
pub(crate) use element::gemm;
pub use element::Element;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient of the output w.r.t. each parent, in parent order. `None` when
/// the parent does not need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major float tensor participating in a differentiation graph.
pub struct Tensor<T: Element = f32> {
    node: Arc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.node.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("shape {shape:?} has a zero extent")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} needs {n} elements, got {len}"
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn make(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant (non-tracking) tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(vec![value; n], shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    /// Result of an operation. Drops the backward closure when no parent
    /// tracks gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if parents.iter().any(Tensor::requires_grad) {
            Self::make(data, shape, true, Some(GradFn { parents, backward }))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    /// Leaf copy of this tensor with gradient tracking switched on or off.
    pub fn with_requires_grad(self, flag: bool) -> Self {
        let (data, shape) = match Arc::try_unwrap(self.node) {
            Ok(node) => (node.data, node.shape),
            Err(shared) => (shared.data.clone(), shared.shape.clone()),
        };
        Self::make(data, shape, flag, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::invalid(format!("item() on shape {:?}", self.shape())));
        }
        Ok(self.node.data[0])
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::make(data, self.node.shape.clone(), false, None)
    }

    /// Hex SHA-256 over shape and the little-endian `f64` image of the data.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.data() {
            h.update(v.as_f64().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn id(&self) -> u64 {
        self.node.id
    }

    /// Parents-before-children ordering of every gradient-tracking node
    /// reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            let parents = node.node.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let parent = parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Reverse sweep from a single-element loss. Leaf gradients accumulate
    /// additively, also across repeated calls; use [`Tensor::zero_grad`] to
    /// reset them. Only leaves retain gradients.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            match &node.node.grad_fn {
                None => {
                    let mut slot = node.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.len());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
