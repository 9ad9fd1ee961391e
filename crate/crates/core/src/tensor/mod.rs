//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are flat row-major buffers plus a shape. Differentiable programs
//! are built on a [`Tape`]: operations record themselves in execution order
//! and [`Tape::backward`] replays them in exact reverse, accumulating
//! vector-Jacobian products. Broadcasting is limited to leading batch
//! dimensions so every backward rule stays auditable by hand.

mod adam;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{CorefTerm, RowSpan, Tape, Var};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::Prng;
use crate::scalar::Scalar;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Incompatible shapes for an operation; names both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the shape product.
    Numel { shape: Vec<usize>, len: usize },
    /// An index (embedding id, span bound, position) is out of range.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// An operation contract was violated.
    Contract(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::Numel { shape, len } => {
                write!(f, "shape {shape:?} requires {} values, got {len}", numel(shape))
            }
            TensorError::Index { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            TensorError::Contract(msg) => write!(f, "contract violation: {msg}"),
        }
    }
}

impl core::error::Error for TensorError {}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense n-dimensional array of scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Leaf flag: backward populates `grad` for tensors that require it.
    pub requires_grad: bool,
    /// Accumulated gradient, same shape as `data`. Grows across backward
    /// calls until explicitly reset.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Numel { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn scalar_value(value: S) -> Self {
        Self { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian init, the default for projections and embeddings.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Prng) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| S::from_f64(rng.next_normal() * std))
            .collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Split borrow of values and gradient, for in-place parameter updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [S], Option<&[S]>) {
        (&mut self.data, self.grad.as_deref())
    }

    /// Extract the single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<S, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(alloc::format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Convert element type; used to instantiate f32 models in f64 for
    /// gradient checking.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
