//! Minimal reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in exact reverse recording order and accumulates gradients into leaf
//! nodes created with `requires_grad = true`. The engine is generic over
//! [`Scalar`] so the same graph can be evaluated in `f32` (training) or `f64`
//! (gradient checks and exact-equivalence checks).
//!
//! A tape is single-threaded; independent tapes may live on separate threads.

mod adam;
mod kernels;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use kernels::{conv1d_output_len, conv_transpose1d_output_len};
pub use ops::{Broadcast, Conv1dConfig, ConvTranspose1dConfig, CHANNEL_NORM_EPS};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

use ops::Op;

/// Floating-point element type a tape can run in.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Ordered record of operations; a node's inputs always precede it, so the
/// recording is a DAG by construction.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and its saved activations. Handles issued before the
    /// call are invalidated.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients in
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NumericFailure {
                op: "leaf",
                detail: "non-finite leaf value".into(),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if let Some(bad) = value.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                op: op_name,
                detail: format!("forward produced {bad}"),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. Gradients are accumulated (not
    /// overwritten) into every reachable leaf that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss node is not on this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += *g),
                    None => *slot = Some(gout),
                }
                continue;
            }
            node.op.backward(&self.nodes, idx, &gout, &mut grads)?;
            for input in node.op.inputs() {
                if let Some(g) = grads[input.0].as_ref() {
                    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                        return Err(Error::NumericFailure {
                            op: node.op.name(),
                            detail: format!("backward produced {bad}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient slot of `id`, allocating it on first use.
pub(crate) fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    len: usize,
) -> &mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}
