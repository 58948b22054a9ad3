//! Dense `f64` tensors with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and, when any input requires a gradient, a backward closure. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order and each node is visited once.

mod gradcheck;
mod ops;
mod optim;
mod params;

use std::cell::{Ref, RefCell};

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_params, primitive_grad_checks, GradCheckReport};
pub use optim::{cosine_lr, AdamConfig, AdamState};
pub use params::{
    BoundParams, Checkpoint, CheckpointError, CheckpointHeader, ParamStore, CHECKPOINT_FORMAT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of bounds for {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: segment {segment} is empty")]
    EmptySegment { op: &'static str, segment: usize },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent, treating a tensor as a stack of rows.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all but the leading extent.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.row_len();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&BackCtx<'_>, &[f64], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Read access to forward values during the backward sweep.
pub(crate) struct BackCtx<'a> {
    nodes: &'a [Node],
    this: usize,
}

impl BackCtx<'_> {
    pub(crate) fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn out(&self) -> &Tensor {
        &self.nodes[self.this].value
    }
}

/// Gradient accumulators, one lazily-allocated buffer per node.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    pub(crate) fn buf(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.buf(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// Recording graph. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_node(value, true, None)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, false, None)
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&BackCtx<'_>, &[f64], &mut GradSink<'_>) + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_node(value, requires_grad, Some(Box::new(backward)))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Borrowed forward value. Drop the guard before recording further ops.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Reverse sweep from a scalar loss. Gradients of leaves stay available
    /// through [`Graph::grad`]; intermediate buffers are released as the sweep
    /// passes them.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.0].value.shape;
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let ctx = BackCtx {
                nodes: &nodes,
                this: id,
            };
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward(&ctx, &gout, &mut sink);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last loss w.r.t. a leaf. Leaves that require a gradient
    /// but were not reached get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        if !nodes[v.0].requires_grad || nodes[v.0].backward.is_some() {
            return None;
        }
        let shape = nodes[v.0].value.shape.clone();
        let data = self
            .grads
            .borrow()
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
        Some(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests;
