//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records one training step: every operation whose inputs are
//! attached to the tape pushes a backward closure, and [`backward`] replays
//! the closures in reverse recording order (a valid reverse topological
//! order, since recording follows execution). Gradients accumulate into
//! every tensor flagged `requires_grad`, so separate backward passes sum
//! into parameter gradients until [`Tensor::zero_grad`] is called.
//!
//! Persistent leaves (model parameters) are created with [`Tensor::param`]
//! and enter a step's graph through [`Tape::watch`]; forward passes without
//! a tape run as plain value computations, which is the inference mode.
//! A tape is consumed by its backward pass — build a fresh graph per step.

mod conv;
mod ops;

pub mod check;
pub mod checkpoint;
pub mod optim;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
}

impl TensorInner {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Mutable view of the gradient buffer, allocated on first use.
    fn grad_mut(&self) -> RefMut<'_, Vec<f64>> {
        RefMut::map(self.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![0.0; self.numel()])
        })
    }
}

/// Dense f64 tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
    tape: Option<Tape>,
}

/// Ordered record of one step's operations, replayed backwards.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

#[derive(Default)]
struct TapeInner {
    ops: RefCell<Vec<Box<dyn Fn()>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Attach a tensor to this tape so downstream operations record.
    /// The returned tensor shares storage (and gradient buffer) with the
    /// original, so watched parameters still accumulate gradients in place.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        if let Some(existing) = &t.tape {
            assert!(
                Rc::ptr_eq(&existing.inner, &self.inner),
                "tensor already belongs to a different tape"
            );
        }
        Tensor {
            inner: Rc::clone(&t.inner),
            tape: Some(self.clone()),
        }
    }

    /// Number of recorded operations (drained by [`backward`]).
    pub fn len(&self) -> usize {
        self.inner.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, f: impl Fn() + 'static) {
        self.inner.ops.borrow_mut().push(Box::new(f));
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tape: Option<Tape>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
            tape,
        }
    }

    /// Result of an op: tracked iff it was produced on a tape.
    pub(crate) fn result(shape: Vec<usize>, data: Vec<f64>, tape: Option<Tape>) -> Tensor {
        let requires_grad = tape.is_some();
        Tensor::build(shape, data, requires_grad, tape)
    }

    /// Constant tensor (no gradient, no tape).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor::build(shape, data, false, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape, vec![0.0; n], false, None)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, None)
    }

    /// Trainable leaf: gradients accumulate here after backward passes.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor::build(shape, data, true, None))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values (optimizer updates, checkpoint loading).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Current gradient, if any backward pass has written one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// 2-D accessor helpers.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape().len(), 2);
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape().len(), 2);
        self.shape()[1]
    }

    pub(crate) fn merge_tapes(inputs: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<&Tape> = None;
        for t in inputs {
            if let Some(tp) = &t.tape {
                match found {
                    None => found = Some(tp),
                    Some(existing) => assert!(
                        Rc::ptr_eq(&existing.inner, &tp.inner),
                        "operation mixes tensors from different tapes"
                    ),
                }
            }
        }
        found.cloned()
    }

    pub(crate) fn record(tape: &Option<Tape>, f: impl Fn() + 'static) {
        if let Some(t) = tape {
            t.push(f);
        }
    }

    pub(crate) fn inner(&self) -> Rc<TensorInner> {
        Rc::clone(&self.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.data.borrow();
        let preview: Vec<f64> = d.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?}{})",
            self.inner.shape,
            self.inner.requires_grad,
            preview.len(),
            preview,
            if d.len() > 8 { ", ..." } else { "" }
        )
    }
}

/// Helpers shared by backward closures.
impl TensorInner {
    /// Read the output gradient; `None` means nothing flowed here.
    fn grad_read(&self) -> Option<Vec<f64>> {
        self.grad.borrow().clone()
    }

    /// Accumulate into this tensor's gradient if it participates in
    /// differentiation (constants are skipped).
    fn accumulate(&self, f: impl FnOnce(&mut [f64])) {
        if self.requires_grad {
            f(&mut self.grad_mut());
        }
    }
}

/// Run the backward pass from a scalar loss, consuming the tape.
///
/// Accumulates gradients into every `requires_grad` tensor reachable from
/// the loss. Calling it again on the same (now drained) tape is a no-op.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let tape = loss
        .tape
        .as_ref()
        .ok_or_else(|| Error::contract("loss is not attached to a tape"))?;
    loss.inner.grad_mut()[0] += 1.0;
    let ops = std::mem::take(&mut *tape.inner.ops.borrow_mut());
    for op in ops.into_iter().rev() {
        op();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let loss = tape.watch(&x).sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn accumulation_across_two_backward_calls_sums() {
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let w = tape.watch(&x);
            let loss = w.mul(&w).sum_all();
            backward(&loss).unwrap();
        }
        // d(x^2)/dx = 6 per pass, twice.
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.watch(&x).mul_scalar(2.0);
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn untaped_forward_records_nothing() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x);
        assert!(y.tape().is_none());
        assert!(!y.requires_grad());
    }

    #[test]
    fn determinism_same_seed_bitwise() {
        let run = || {
            let tape = Tape::new();
            let x = Tensor::param(vec![4], vec![0.3, -0.7, 1.9, 0.01]).unwrap();
            let w = tape.watch(&x);
            let loss = w.exp().mul(&w.sigmoid()).sum_all();
            backward(&loss).unwrap();
            (loss.value(), x.grad().unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
