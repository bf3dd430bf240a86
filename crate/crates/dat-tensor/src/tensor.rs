use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Error, Result};
use crate::scalar::{DType, Scalar};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
}

/// Dense row-major n-dimensional array.
///
/// Values are immutable once the tensor is built; the only mutable state is
/// the gradient buffer, which `Graph::backward` accumulates into for leaves
/// created with [`Tensor::param`]. Clones share storage.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            T::DTYPE,
            self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
            }),
        })
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::build(shape.into(), data, false)
    }

    /// Leaf tensor that receives gradients from `backward`.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::build(shape.into(), data, true)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::build(shape, vec![T::zero(); numel], false).expect("consistent by construction")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::build(shape, vec![value; numel], false).expect("consistent by construction")
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false).expect("consistent by construction")
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::build(shape, data, false).expect("op produced inconsistent shape")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// Single stored value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return dim_err(format!("item() on shape {:?}", self.shape()));
        }
        Ok(self.inner.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
