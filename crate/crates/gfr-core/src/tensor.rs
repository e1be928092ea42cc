//! Immutable n-dimensional value tensors.
//!
//! A [`Tensor`] is a cheap-to-clone handle over a contiguous `f64` buffer
//! plus a shape. Values never change after construction; optimizers replace
//! whole tensors instead of mutating them. Gradient buffers live behind a
//! `RefCell` and are populated by [`crate::tape::Tape::backward`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Immutable value with optional participation in gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    /// Construct a tensor, validating extent/buffer agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} expects {} scalars, buffer holds {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor construction",
                detail: format!("buffer contains {v}"),
            });
        }
        Ok(Self::new_unchecked(shape, data, false))
    }

    /// Construct a trainable leaf (a parameter).
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data,
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape, vec![0.0; n], false)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    /// The single scalar held by a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of {} elements",
                self.len()
            )))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle trainability. Freezing also drops any gradient buffer so a
    /// frozen parameter never carries one.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
        if !value {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into the gradient buffer, allocating zeros first if absent.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Ensure a gradient buffer exists (zeros when no path reached this leaf).
    pub(crate) fn ensure_grad(&self) {
        let mut slot = self.inner.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_agreement_enforced() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn non_finite_buffers_rejected() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn zero_extent_allowed() {
        let t = Tensor::new(vec![0, 4], vec![]).unwrap();
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn freezing_drops_grad_buffer() {
        let t = Tensor::leaf(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]);
        assert!(t.has_grad());
        t.set_requires_grad(false);
        assert!(!t.has_grad());
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let t = Tensor::leaf(vec![2], vec![0.0, 0.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 4.0]);
    }
}
