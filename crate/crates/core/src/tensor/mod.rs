//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Only what a small decoder-only transformer needs: 2-D matmuls, row-wise
//! normalizations, a fused causal attention kernel and a weighted
//! cross-entropy. Everything is generic over [`Scalar`] so the same graph can
//! run in single precision for training and double precision for gradient
//! checks.

mod dump;
mod scalar;
mod tape;

pub use dump::{read_tensor, write_tensor, TensorHeader};
pub use scalar::{Precision, Scalar};
pub use tape::{Segment, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("no loss-bearing tokens (total weight is zero)")]
    NoLossBearingTokens,
    #[error("invalid loss weight {weight} at position {position}")]
    InvalidWeight { position: usize, weight: f64 },
    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange { op: &'static str, index: usize, limit: usize },
    #[error("variable belongs to a different tape")]
    Detached,
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("malformed tensor dump: {0}")]
    Dump(String),
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&x| T::from_f64(x).unwrap()).collect())
    }

    pub fn scalar(x: T) -> Self {
        Self { shape: Vec::new(), data: vec![x] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor; vectors count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            [] => (1, 1),
            _ => (self.shape[0], self.data.len() / self.shape[0].max(1)),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts to another precision (exact for f32 -> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

/// `c = a' * b' + beta * c` over strided views; `a'` is `m x k`, `b'` is
/// `k x n`. Offsets and strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], usize, isize, isize),
    b: (&[T], usize, isize, isize),
    beta: T,
    c: (&mut [T], usize, isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, off: usize, rs: isize, cs: isize| {
        off as isize + (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    if k > 0 {
        assert!((span(m, k, a.1, a.2, a.3) as usize) < a.0.len(), "gemm: a out of bounds");
        assert!((span(k, n, b.1, b.2, b.3) as usize) < b.0.len(), "gemm: b out of bounds");
    }
    assert!((span(m, n, c.1, c.2, c.3) as usize) < c.0.len(), "gemm: c out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}
