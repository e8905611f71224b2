//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto row-major storage. Operations
//! live on [`Tape`]; each op records a backward closure so that
//! [`Tape::backward`] can push gradients from a scalar loss to every
//! `requires_grad` ancestor. One tape per forward pass; dropping the tape
//! frees the graph.

mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).unwrap()
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n]).unwrap()
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    /// Trainable leaf: `requires_grad` set, gradient accumulated on backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |i| &i.data)
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        RefMut::map(self.inner.borrow_mut(), |i| &mut i.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() on non-scalar tensor");
        b.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Accumulate `g` into this tensor's gradient buffer. No-op unless
    /// `requires_grad` is set (invariant: non-grad tensors never accumulate).
    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut b = self.inner.borrow_mut();
        if !b.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), b.data.len());
        match &mut b.grad {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            None => b.grad = Some(g.to_vec()),
        }
    }

    /// Pointer identity — used to assert parameter sharing.
    pub fn same_storage(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.inner.borrow();
        write!(f, "Tensor{:?}", b.shape)?;
        if b.data.len() <= 8 {
            write!(f, " {:?}", b.data)?;
        }
        Ok(())
    }
}

struct Entry {
    out: Tensor,
    back: Box<dyn Fn(&[f64])>,
}

/// Per-forward-pass gradient tape. Entries are appended in execution order,
/// which is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, out: &Tensor, back: impl Fn(&[f64]) + 'static) {
        if out.requires_grad() {
            self.entries.borrow_mut().push(Entry {
                out: out.clone(),
                back: Box::new(back),
            });
        }
    }

    /// Seed `loss` with gradient 1 and replay the tape in reverse. Repeated
    /// calls without `zero_grad` accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accum_grad(&[1.0]);
        let entries = self.entries.borrow();
        for e in entries.iter().rev() {
            let g = e.out.grad();
            if let Some(g) = g {
                (e.back)(&g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_grad_tensor_never_accumulates() {
        let t = Tensor::zeros(&[3]);
        t.accum_grad(&[1.0, 1.0, 1.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let t = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(&t).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_square_is_2x() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let sq = tape.hadamard(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        // second replay re-seeds the scalar and doubles everything upstream
        s.zero_grad();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
