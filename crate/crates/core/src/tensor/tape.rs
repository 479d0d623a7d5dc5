//! The gradient tape: records one forward pass, replays it in reverse.
//!
//! Ops append nodes in execution order, so the tape is topologically sorted
//! by construction. [`Tape::backward`] seeds the scalar loss with gradient
//! 1.0 and walks the nodes in reverse, accumulating into each parent; fan-out
//! therefore sums gradients additively. A tape supports exactly one backward
//! pass.
//!
//! Mixing [`Var`]s across tapes is a programming error and panics; shape and
//! argument problems on the recorded ops are reported as [`Error`]s.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Conv2dDims};
use crate::tensor::{Elem, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T: Elem> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        cols: Tensor<T>,
        dims: Conv2dDims,
    },
    MaxPool {
        a: usize,
        argmax: Vec<u32>,
    },
    Gap {
        a: usize,
    },
    Dense {
        input: usize,
        weights: usize,
        bias: usize,
    },
    Reshape {
        a: usize,
    },
    SoftmaxCe {
        logits: usize,
        softmax: Tensor<T>,
        labels: Vec<usize>,
    },
    SelectSum {
        a: usize,
        picks: Vec<(usize, usize)>,
    },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

struct TapeInner<T: Elem> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Records ops for one forward pass. Not `Sync`: each tape belongs to one
/// pass on one thread; independent tapes may run concurrently.
pub struct Tape<T: Elem> {
    id: u64,
    inner: RefCell<TapeInner<T>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    fn index_of(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        var.index
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self.id,
            index: inner.nodes.len() - 1,
        }
    }

    /// Registers an input tensor. Only `requires_grad` leaves (and ops fed by
    /// them) receive gradients, so inference-only operands should pass
    /// `false` to skip their backward work.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// The recorded value of `var` (cloned; tapes stay immutable).
    pub fn value(&self, var: Var) -> Tensor<T> {
        let i = self.index_of(var);
        self.inner.borrow().nodes[i].value.clone()
    }

    /// The gradient of the loss w.r.t. `var`, if backward has run and the
    /// variable participates in differentiation.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let i = self.index_of(var);
        self.inner.borrow().nodes[i].grad.clone()
    }

    /// Reads parent state needed to record an op: values plus the combined
    /// requires_grad flag.
    fn with_values<R>(&self, vars: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> (R, bool) {
        let inner = self.inner.borrow();
        let values: Vec<&Tensor<T>> = vars.iter().map(|&i| &inner.nodes[i].value).collect();
        let rg = vars.iter().any(|&i| inner.nodes[i].requires_grad);
        (f(&values), rg)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index_of(a), self.index_of(b));
        let (value, rg) = self.with_values(&[ai, bi], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(Error::shape(
                    "add",
                    format!("operand shapes {:?} and {:?} differ", v[0].shape(), v[1].shape()),
                ));
            }
            let mut out = v[0].clone();
            for (o, &r) in out.data_mut().iter_mut().zip(v[1].data()) {
                *o += r;
            }
            Ok(out)
        });
        Ok(self.push(value?, rg, Op::Add { a: ai, b: bi }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index_of(a), self.index_of(b));
        let (value, rg) = self.with_values(&[ai, bi], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(Error::shape(
                    "mul",
                    format!("operand shapes {:?} and {:?} differ", v[0].shape(), v[1].shape()),
                ));
            }
            let mut out = v[0].clone();
            for (o, &r) in out.data_mut().iter_mut().zip(v[1].data()) {
                *o *= r;
            }
            Ok(out)
        });
        Ok(self.push(value?, rg, Op::Mul { a: ai, b: bi }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, a: Var, factor: T) -> Var {
        let ai = self.index_of(a);
        let (value, rg) = self.with_values(&[ai], |v| v[0].map(|x| x * factor));
        self.push(value, rg, Op::Scale { a: ai, factor })
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let ai = self.index_of(a);
        let (value, rg) = self.with_values(&[ai], |v| {
            Tensor::scalar(v[0].data().iter().fold(T::zero(), |acc, &x| acc + x))
        });
        self.push(value, rg, Op::Sum { a: ai })
    }

    /// Elementwise `max(0, v)`; the gradient at exactly 0 is defined as 0.
    pub fn relu(&self, a: Var) -> Var {
        let ai = self.index_of(a);
        let (value, rg) = self.with_values(&[ai], |v| ops::relu_forward(v[0]));
        self.push(value, rg, Op::Relu { a: ai })
    }

    /// Cross-correlation with zero padding; see the module docs for the
    /// output-extent formula.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ii, ki, bi) = (self.index_of(input), self.index_of(kernel), self.index_of(bias));
        let (result, rg) = self.with_values(&[ii, ki, bi], |v| {
            ops::conv2d_forward(v[0], v[1], v[2], stride, padding)
        });
        let (value, cols, dims) = result?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input: ii,
                kernel: ki,
                bias: bi,
                cols,
                dims,
            },
        ))
    }

    /// Per-window spatial maximum; ties route the gradient to the first
    /// maximum in row-major order.
    pub fn max_pool2d(&self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let ai = self.index_of(a);
        let (result, rg) =
            self.with_values(&[ai], |v| ops::max_pool2d_forward(v[0], window, stride));
        let (value, argmax) = result?;
        Ok(self.push(value, rg, Op::MaxPool { a: ai, argmax }))
    }

    /// Mean over the spatial dimensions: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let ai = self.index_of(a);
        let (result, rg) = self.with_values(&[ai], |v| ops::global_avg_pool_forward(v[0]));
        Ok(self.push(result?, rg, Op::Gap { a: ai }))
    }

    /// Affine map `input·weights + bias`.
    pub fn dense(&self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (ii, wi, bi) = (self.index_of(input), self.index_of(weights), self.index_of(bias));
        let (result, rg) =
            self.with_values(&[ii, wi, bi], |v| ops::dense_forward(v[0], v[1], v[2]));
        Ok(self.push(
            result?,
            rg,
            Op::Dense {
                input: ii,
                weights: wi,
                bias: bi,
            },
        ))
    }

    /// Reinterprets the value under a new shape with equal element count.
    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ai = self.index_of(a);
        let (result, rg) = self.with_values(&[ai], |v| v[0].reshaped(shape));
        Ok(self.push(result?, rg, Op::Reshape { a: ai }))
    }

    /// Mean softmax cross-entropy of `labels` over the rows of `logits`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.index_of(logits);
        let (result, rg) =
            self.with_values(&[li], |v| ops::softmax_cross_entropy_forward(v[0], labels));
        let (value, softmax) = result?;
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCe {
                logits: li,
                softmax,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Sum of selected `(row, column)` entries of a rank-2 tensor — the
    /// scalar head used to differentiate individual class scores.
    pub fn select_sum(&self, a: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let ai = self.index_of(a);
        let (result, rg) = self.with_values(&[ai], |v| {
            let [n, k] = *v[0].shape() else {
                return Err(Error::shape(
                    "select_sum",
                    format!("input must be rank 2, got {:?}", v[0].shape()),
                ));
            };
            if let Some(&(r, c)) = picks.iter().find(|&&(r, c)| r >= n || c >= k) {
                return Err(Error::shape(
                    "select_sum",
                    format!("pick ({r}, {c}) out of range for [{n}, {k}]"),
                ));
            }
            let total = picks
                .iter()
                .fold(T::zero(), |acc, &(r, c)| acc + v[0].data()[r * k + c]);
            Ok(Tensor::scalar(total))
        });
        Ok(self.push(result?, rg, Op::SelectSum { a: ai, picks: picks.to_vec() }))
    }

    /// Runs reverse-mode differentiation from a scalar loss. Fails on a
    /// non-scalar loss or when the tape already ran backward.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.index_of(loss);
        let mut borrow = self.inner.borrow_mut();
        let inner = &mut *borrow;
        if inner.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if !inner.nodes[li].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[li].value.shape()
            )));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[li].requires_grad {
            grads[li] = Some(Tensor::full(nodes[li].value.shape().to_vec(), T::one()));
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rg = |idx: usize| nodes[idx].requires_grad;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    if rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::Mul { a, b } => {
                    for (dst, other) in [(*a, *b), (*b, *a)] {
                        if rg(dst) {
                            let mut c = g.clone();
                            for (ci, &ov) in c.data_mut().iter_mut().zip(nodes[other].value.data())
                            {
                                *ci *= ov;
                            }
                            accumulate(&mut grads[dst], c);
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if rg(*a) {
                        let f = *factor;
                        accumulate(&mut grads[*a], g.map(|v| v * f));
                    }
                }
                Op::Sum { a } => {
                    if rg(*a) {
                        let gv = g.data()[0];
                        accumulate(
                            &mut grads[*a],
                            Tensor::full(nodes[*a].value.shape().to_vec(), gv),
                        );
                    }
                }
                Op::Relu { a } => {
                    if rg(*a) {
                        let mut c = g.clone();
                        for (ci, &x) in c.data_mut().iter_mut().zip(nodes[*a].value.data()) {
                            if x <= T::zero() {
                                *ci = T::zero();
                            }
                        }
                        accumulate(&mut grads[*a], c);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cols,
                    dims,
                } => {
                    let conv = ops::conv2d_backward(
                        &g,
                        cols,
                        &nodes[*kernel].value,
                        dims,
                        rg(*input),
                        rg(*kernel),
                        rg(*bias),
                    );
                    if let Some(di) = conv.dinput {
                        accumulate(&mut grads[*input], di);
                    }
                    if let Some(dk) = conv.dkernel {
                        accumulate(&mut grads[*kernel], dk);
                    }
                    if let Some(db) = conv.dbias {
                        accumulate(&mut grads[*bias], db);
                    }
                }
                Op::MaxPool { a, argmax } => {
                    if rg(*a) {
                        accumulate(
                            &mut grads[*a],
                            ops::max_pool2d_backward(&g, argmax, nodes[*a].value.shape()),
                        );
                    }
                }
                Op::Gap { a } => {
                    if rg(*a) {
                        accumulate(
                            &mut grads[*a],
                            ops::global_avg_pool_backward(&g, nodes[*a].value.shape()),
                        );
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let dense = ops::dense_backward(
                        &g,
                        &nodes[*input].value,
                        &nodes[*weights].value,
                        rg(*input),
                        rg(*weights),
                        rg(*bias),
                    );
                    if let Some(di) = dense.dinput {
                        accumulate(&mut grads[*input], di);
                    }
                    if let Some(dw) = dense.dweights {
                        accumulate(&mut grads[*weights], dw);
                    }
                    if let Some(db) = dense.dbias {
                        accumulate(&mut grads[*bias], db);
                    }
                }
                Op::Reshape { a } => {
                    if rg(*a) {
                        let back = g
                            .reshaped(nodes[*a].value.shape().to_vec())
                            .expect("reshape backward preserves element count");
                        accumulate(&mut grads[*a], back);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    softmax,
                    labels,
                } => {
                    if rg(*logits) {
                        let upstream = g.data()[0];
                        accumulate(
                            &mut grads[*logits],
                            ops::softmax_cross_entropy_backward(softmax, labels, upstream),
                        );
                    }
                }
                Op::SelectSum { a, picks } => {
                    if rg(*a) {
                        let gv = g.data()[0];
                        let k = nodes[*a].value.shape()[1];
                        let mut c = Tensor::zeros(nodes[*a].value.shape().to_vec());
                        for &(r, col) in picks {
                            c.data_mut()[r * k + col] += gv;
                        }
                        accumulate(&mut grads[*a], c);
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in inner.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }
}

/// Adds a contribution into a gradient slot, allocating on first use.
fn accumulate<T: Elem>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), contribution.shape());
            for (a, &c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 3.0, 0.5]).unwrap(), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn gradient_of_sum_of_squares_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient_is_positivity_indicator() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0f32, 2.0]).unwrap(), true);
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-0.0f32, 0.0, 1.0]).unwrap(), true);
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates_additively() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap(), true);
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(vec![2, 2]), true);
        let e = tape.backward(x).unwrap_err();
        assert!(e.to_string().contains("scalar"), "{e}");
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f32), true);
        let loss = tape.scale(x, 3.0);
        tape.backward(loss).unwrap();
        let e = tape.backward(loss).unwrap_err();
        assert!(e.to_string().contains("already ran"), "{e}");
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn foreign_variable_panics() {
        let a = Tape::new();
        let b = Tape::<f32>::new();
        let x = a.leaf(Tensor::scalar(1.0f32), true);
        let _ = b.value(x);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::<f32>::zeros(vec![2, 2]), false);
        let b = tape.leaf(Tensor::<f32>::zeros(vec![4]), false);
        let e = tape.add(a, b).unwrap_err();
        assert!(e.to_string().contains("differ"), "{e}");
    }

    #[test]
    fn non_participating_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(), true);
        let frozen = tape.leaf(Tensor::new(vec![2], vec![5.0f32, 6.0]).unwrap(), false);
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0]);
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn select_sum_scatters_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            true,
        );
        let s = tape.select_sum(x, &[(0, 2), (1, 0), (0, 2)]).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 2.0 + 3.0 + 2.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn select_sum_rejects_out_of_range_pick() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(vec![2, 3]), false);
        let e = tape.select_sum(x, &[(2, 0)]).unwrap_err();
        assert!(e.to_string().contains("out of range"), "{e}");
    }

    #[test]
    fn intermediate_gradients_are_retained() {
        // GradCAM relies on reading gradients of interior op outputs.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(), true);
        let doubled = tape.scale(x, 2.0);
        let sq = tape.mul(doubled, doubled).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        // d loss / d doubled = 2 * doubled = [4, 8]
        assert_eq!(tape.grad(doubled).unwrap().data(), &[4.0, 8.0]);
    }
}
