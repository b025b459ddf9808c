//! Dense tensors over a contiguous buffer, shared by cheap handle clones.
//!
//! A `Tensor` is a reference-counted handle; ops record handle clones on the
//! tape so backward can accumulate gradients into the exact buffers the
//! forward pass used. Data is conceptually immutable once an op has produced
//! it; the only sanctioned in-place mutation is a parameter update between
//! steps (optimizer, EMA), which happens while no tape is alive.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Inner<E: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
}

pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::Dim("tensor shape must be non-empty".into()));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![E::zero(); numel]).expect("zeros: shape/buffer agree")
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: shape/buffer agree")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar: shape/buffer agree")
    }

    /// Marks the tensor as a gradient leaf and returns it (builder style).
    pub fn requires_grad(self, flag: bool) -> Self {
        self.inner.requires_grad.set(flag);
        self
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Current gradient, cloned. None until backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Removes and returns the gradient, leaving None behind.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutable view of the gradient buffer, allocating zeros on first touch.
    /// Backward uses this to accumulate in place without temporaries.
    pub(crate) fn grad_slot(&self) -> RefMut<'_, Vec<E>> {
        let numel = self.numel();
        RefMut::map(self.inner.grad.borrow_mut(), |slot| {
            slot.get_or_insert_with(|| vec![E::zero(); numel])
        })
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first touch.
    pub fn accum_grad(&self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.numel(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    /// Deep copy with its own buffer; never participates in backward.
    pub fn detached_copy(&self) -> Self {
        Tensor::from_vec(&self.inner.shape, self.inner.data.borrow().clone())
            .expect("detached copy preserves shape/buffer agreement")
    }

    /// Handle identity: do both handles alias the same buffer?
    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Debug-build guard: forward ops must not manufacture NaN/Inf from
    /// finite inputs. Release builds skip the scan.
    #[inline]
    pub fn debug_assert_finite(&self, op: &str) {
        if cfg!(debug_assertions) {
            let data = self.inner.data.borrow();
            for (i, v) in data.iter().enumerate() {
                assert!(
                    v.is_finite(),
                    "{op}: non-finite value {v} at flat index {i}"
                );
            }
        }
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}
