//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation that sees a gradient-requiring input records its parents
//! and a backward closure; `backward()` walks the recorded graph once in
//! reverse topological order. The graph is rebuilt on every forward pass.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

mod batchnorm;
mod broadcast;
mod conv;
pub mod gemm;
pub mod profile;

pub use batchnorm::Mode as BatchNormMode;
pub use conv::concat_batch;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("shapes {0:?} and {1:?} are not broadcast-compatible")]
    BroadcastIncompatible(Vec<usize>, Vec<usize>),
    #[error("matmul inner dimensions differ: {0:?} x {1:?}")]
    InnerDimMismatch(Vec<usize>, Vec<usize>),
    #[error("expected rank-{expected} tensor, got shape {got:?}")]
    BadRank { expected: usize, got: Vec<usize> },
    #[error("invalid {op} geometry: input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding}: {reason}")]
    BadGeometry {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        padding: usize,
        reason: String,
    },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("clamp bounds inverted: lo {0} > hi {1}")]
    ClampBounds(f64, f64),
    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchNormTooSmall(usize),
    #[error("data length {got} does not match shape {shape:?} ({want} values)")]
    DataLength { shape: Vec<usize>, want: usize, got: usize },
    #[error("reduction axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("upsample factor must be >= 1")]
    BadUpsampleFactor,
    #[error("concat needs at least one input")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a [f64],
    pub parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>)>;

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    leaf: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node in the computation graph. Cloning is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let want: usize = shape.iter().product();
    if want != len {
        return Err(TensorError::DataLength { shape: shape.to_vec(), want, got: len });
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor with no gradient tracking.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor {
            node: Rc::new(Node {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                leaf: true,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::constant(shape, data)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n]).expect("consistent length")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::constant(shape, vec![value; n]).expect("consistent length")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(&[1], vec![value]).expect("scalar")
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&BackwardCtx<'_>) + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.requires_grad());
        if !requires {
            return Tensor {
                node: Rc::new(Node {
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(false),
                    leaf: false,
                    parents: Vec::new(),
                    backward: None,
                }),
            };
        }
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(true),
                leaf: false,
                parents,
                backward: Some(Box::new(backward)),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Mutable access to the raw values. Reserved for optimizer updates and
    /// buffer maintenance on leaf tensors; never call on a tensor that is part
    /// of a live graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "value() on non-scalar");
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Enable or disable gradient tracking on a leaf (parameter freezing).
    pub fn set_requires_grad(&self, value: bool) {
        assert!(self.node.leaf, "requires_grad can only be toggled on leaves");
        self.node.requires_grad.set(value);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.leaf
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values as a fresh constant, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(&self.node.shape, self.to_vec()).expect("same length")
    }

    pub(crate) fn add_to_grad(&self, contribution: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Mutable gradient buffer, zero-initialized on first access.
    pub(crate) fn grad_buf_mut(&self) -> RefMut<'_, Vec<f64>> {
        {
            let mut slot = self.node.grad.borrow_mut();
            if slot.is_none() {
                *slot = Some(vec![0.0; self.numel()]);
            }
        }
        RefMut::map(self.node.grad.borrow_mut(), |s| s.as_mut().expect("just filled"))
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode sweep from a scalar. Populates `grad` on every reachable
    /// tensor that requires gradients; each graph node is visited exactly once.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar output");
        if !self.requires_grad() {
            return;
        }
        // iterative post-order DFS over gradient-requiring parents
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((t, idx)) = stack.pop() {
            let parents = &t.node.parents;
            let mut pushed = false;
            let mut i = idx;
            while i < parents.len() {
                let p = &parents[i];
                if p.requires_grad() && !visited.contains(&p.ptr()) {
                    visited.insert(p.ptr());
                    stack.push((t.clone(), i + 1));
                    stack.push((p.clone(), 0));
                    pushed = true;
                    break;
                }
                i += 1;
            }
            if !pushed {
                topo.push(t);
            }
        }

        self.add_to_grad(&[1.0]);
        for t in topo.iter().rev() {
            if let Some(backward) = &t.node.backward {
                let grad = t.node.grad.borrow();
                let grad = grad.as_ref().expect("reverse order guarantees a gradient");
                let out = t.node.data.borrow();
                backward(&BackwardCtx { grad, out: &out, parents: &t.node.parents });
            }
        }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast::binary_op(self, other, |a, b| a + b, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast::binary_op(self, other, |a, b| a - b, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast::binary_op(self, other, |a, b| a * b, BinaryKind::Mul)
    }

    pub fn neg(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            if ctx.parents[0].requires_grad() {
                let mut g = ctx.parents[0].grad_buf_mut();
                for (gi, up) in g.iter_mut().zip(ctx.grad) {
                    *gi -= up;
                }
            }
        })
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            if ctx.parents[0].requires_grad() {
                ctx.parents[0].add_to_grad(ctx.grad);
            }
        })
    }

    pub fn mul_scalar(&self, value: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * value).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let mut g = ctx.parents[0].grad_buf_mut();
                for (gi, up) in g.iter_mut().zip(ctx.grad) {
                    *gi += up * value;
                }
            }
        })
    }

    // ---- activations and pointwise functions ----

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            if ctx.parents[0].requires_grad() {
                let mut g = ctx.parents[0].grad_buf_mut();
                for ((gi, up), y) in g.iter_mut().zip(ctx.grad).zip(ctx.out) {
                    *gi += up * y * (1.0 - y);
                }
            }
        })
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let saved = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let x = saved.data();
                let mut g = ctx.parents[0].grad_buf_mut();
                for ((gi, up), &xv) in g.iter_mut().zip(ctx.grad).zip(x.iter()) {
                    // subgradient 0 at the kink
                    if xv > 0.0 {
                        *gi += up;
                    }
                }
            }
        })
    }

    /// ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise.
    pub fn elu(&self) -> Tensor {
        let data: Vec<f64> =
            self.data().iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect();
        let saved = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let x = saved.data();
                let mut g = ctx.parents[0].grad_buf_mut();
                for (((gi, up), y), &xv) in g.iter_mut().zip(ctx.grad).zip(ctx.out).zip(x.iter()) {
                    // derivative below zero is exp(x) = y + 1
                    *gi += if xv > 0.0 { *up } else { up * (y + 1.0) };
                }
            }
        })
    }

    /// Natural log. Non-positive inputs are a contract violation of the caller
    /// (guard with `clamp` first) and produce an error.
    pub fn log(&self) -> Result<Tensor> {
        let src = self.data();
        let mut data = Vec::with_capacity(src.len());
        for &v in src.iter() {
            if v <= 0.0 {
                return Err(TensorError::LogDomain(v));
            }
            data.push(v.ln());
        }
        drop(src);
        let saved = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let x = saved.data();
                let mut g = ctx.parents[0].grad_buf_mut();
                for ((gi, up), &xv) in g.iter_mut().zip(ctx.grad).zip(x.iter()) {
                    *gi += up / xv;
                }
            }
        }))
    }

    /// Clamp values into [lo, hi]. Gradient passes through where the input
    /// already lay inside the bounds and is zero where clamping was applied.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(TensorError::ClampBounds(lo, hi));
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let saved = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let x = saved.data();
                let mut g = ctx.parents[0].grad_buf_mut();
                for ((gi, up), &xv) in g.iter_mut().zip(ctx.grad).zip(x.iter()) {
                    if xv >= lo && xv <= hi {
                        *gi += up;
                    }
                }
            }
        }))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let up = ctx.grad[0];
                let mut g = ctx.parents[0].grad_buf_mut();
                for gi in g.iter_mut().take(n) {
                    *gi += up;
                }
            }
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![total / n as f64], vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let up = ctx.grad[0] / n as f64;
                let mut g = ctx.parents[0].grad_buf_mut();
                for gi in g.iter_mut().take(n) {
                    *gi += up;
                }
            }
        })
    }

    /// Sum over the given axes (removed from the output shape).
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        broadcast::reduce_axes(self, axes, false)
    }

    /// Mean over the given axes (removed from the output shape).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        broadcast::reduce_axes(self, axes, true)
    }

    // ---- structural ops (implemented in conv.rs) ----
    // conv2d, conv2d_transpose, upsample_nearest, concat_channels, matmul,
    // batchnorm2d live in sibling modules.
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_identity_gradient() {
        let x = t(&[3], &[1.5, -2.0, 0.25]);
        let one = Tensor::constant(&[3], vec![1.0; 3]).unwrap();
        let y = x.mul(&one).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axis() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        c.sum_all().backward();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[4], &[0.0; 4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "message names both shapes: {msg}");
    }

    #[test]
    fn sigmoid_values() {
        let x = t(&[3], &[0.0, 1.0, 40.0]);
        let y = x.sigmoid();
        let v = y.to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.7310585786300049).abs() < 1e-15);
        assert!(v[2] > 1.0 - 1e-12 && v[2] <= 1.0);
    }

    #[test]
    fn relu_and_elu_values() {
        let x = t(&[3], &[-3.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
        let e = x.elu().to_vec();
        assert!((e[0] - ((-3.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
        assert_eq!(e[2], 2.0);
        let xm = t(&[1], &[-1.0]);
        let v = xm.elu().to_vec()[0];
        assert!((v - (-0.6321205588285577)).abs() < 1e-12);
    }

    #[test]
    fn mean_of_two() {
        let x = t(&[2], &[2.0, 4.0]);
        assert_eq!(x.mean_all().value(), 3.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(x.log(), Err(TensorError::LogDomain(_))));
    }

    #[test]
    fn clamp_zeroes_gradient_outside_bounds() {
        let x = t(&[3], &[-1.0, 0.5, 2.0]);
        let y = x.clamp(0.0, 1.0).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_leaves_unreachable_tensors_without_grad() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let c = a.mul_scalar(2.0);
        c.sum_all().backward();
        assert!(a.has_grad());
        assert!(!b.has_grad());
    }

    #[test]
    fn shared_subgraph_accumulates_once_per_use() {
        // y = x + x: dy/dx = 2
        let x = t(&[2], &[1.0, 1.0]);
        let y = x.add(&x).unwrap();
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = t(&[2], &[1.0, 2.0]);
        x.set_requires_grad(false);
        let y = x.mul_scalar(3.0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn sum_axes_and_mean_axes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = x.sum_axes(&[0]).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.to_vec(), vec![5.0, 7.0, 9.0]);
        let m = x.mean_axes(&[1]).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.to_vec(), vec![2.0, 5.0]);
        m.sum_all().backward();
        let g = x.grad().unwrap();
        assert!(g.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
