//! Dense tensors and a minimal reverse-mode automatic differentiation engine.
//!
//! Values are plain row-major buffers. Differentiable computation is recorded
//! on a [`Tape`]; a tensor that was produced by (or registered on) a tape
//! carries a node handle, everything else is an immutable constant. Training
//! runs in `f32`; the gradient-checking oracle re-runs the same generic code
//! in `f64` so that logic errors are separable from roundoff.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_against, finite_diff_check, EvalError, FdReport, GradCheckError};
pub use tape::{Gradients, NodeRef, Tape};

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Scalar element type of the engine. Implemented for `f32` and `f64`.
pub trait Real: Float + fmt::Debug + Send + Sync + 'static {
    /// Lossy cast from an `f64` literal or intermediate.
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }
    fn to64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported input shape {shape:?} ({detail})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: invalid attribute ({detail})")]
    BadAttr { op: &'static str, detail: String },
    #[error("tensor belongs to a different tape")]
    ForeignTape,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss tensor is not tracked on this tape")]
    NotOnTape,
    #[error("duplicate leaf name {0:?}")]
    DuplicateLeaf(String),
}

/// Dense n-dimensional value grid. `node` is set when the tensor is tracked
/// on a live tape; plain values have `node == None` and are freely shareable.
#[derive(Clone)]
pub struct Tensor<E: Real = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    node: Option<NodeRef>,
}

impl<E: Real> Tensor<E> {
    /// Builds a tensor, validating the shape product and that every value is
    /// finite. NaN/Inf in inputs is an error surface, never a silent state.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![E::zero(); n])
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: E) -> Self {
        Self::raw(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        // Mutation severs any tape association; stale node handles on a
        // mutated value would silently desync forward values from the tape.
        self.node = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Copy of the value without any tape association.
    pub fn detached(&self) -> Self {
        Self::raw(self.shape.clone(), self.data.clone())
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<E>]) -> Result<Self, TensorError> {
        assert!(!items.is_empty(), "stack of zero tensors");
        let shape = items[0].shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(items.len());
        out_shape.extend_from_slice(&shape);
        Ok(Self::raw(out_shape, data))
    }

    /// Converts the element type (used to lift `f32` parameters into the
    /// 64-bit shadow evaluation of the gradient oracle).
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| T::of(v.to64())).collect(),
        )
    }
}

/// Equality on shape and payload; tape association is ignored.
impl<E: Real> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<E: Real> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ... {} values]", self.data[0], self.numel())
        }
    }
}
