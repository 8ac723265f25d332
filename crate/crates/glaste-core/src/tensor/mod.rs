//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable N-dimensional array (NCHW convention for
//! images) whose data is shared behind an `Arc`. Differentiable operations
//! are methods on a [`Tape`]: each call computes the forward value and, when
//! the tape is recording and an input is tracked, pushes a record holding the
//! backward rule. [`Tape::backward`] replays the records in reverse and
//! returns per-leaf gradients.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`, where
//! central finite differences are meaningful.

mod adam;
mod conv;
mod ops;
mod tape;

pub use adam::{adam_update, AdamHyper, AdamState};
pub use conv::ConvSpec;
pub use tape::{Gradients, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal converts")
    }

    /// Widen to `f64`.
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar widens")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Identifies a record on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    pub(crate) tape: u64,
    pub(crate) id: usize,
}

/// Immutable dense array with optional computation-graph linkage.
///
/// Cloning is cheap (the buffer is shared). A tensor without a node is a
/// constant or a detached value and participates in no backward pass.
#[derive(Clone)]
pub struct Tensor<T> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    node: Option<Node>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![T::zero(); numel], shape)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape)
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![value], vec![1])
    }

    /// Standard-normal draws scaled by `std`, deterministic per rng stream.
    pub fn randn<R: rand::Rng>(rng: &mut R, shape: impl Into<Vec<usize>>, std: f64) -> Self {
        use rand_distr::Distribution;
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
        let data = (0..numel)
            .map(|_| T::of(dist.sample(rng) * std))
            .collect();
        Tensor::from_vec(data, shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn node(&self) -> Option<Node> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: Option<Node>) -> Self {
        self.node = node;
        self
    }

    /// Share `t`'s buffer under a new graph node.
    pub(crate) fn share(t: &Tensor<T>, node: Option<Node>) -> Self {
        Tensor {
            data: t.data_arc(),
            shape: t.shape.clone(),
            node,
        }
    }

    /// Same values, no graph linkage.
    pub fn detach(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Interpret as NCHW; errors if the rank is not 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::dim(format!("expected rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = self.dims4().expect("rank 4");
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Elementwise cast to another scalar type (used to lift f32 parameters
    /// into the f64 gradient-check path).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::of(v.f64())).collect();
        Tensor::from_vec(data, self.shape.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if self.node.is_some() {
            write!(f, " (tracked)")?;
        }
        Ok(())
    }
}

pub(crate) fn nchw_offset(c_ext: usize, h_ext: usize, w_ext: usize, n: usize, c: usize) -> usize {
    ((n * c_ext + c) * h_ext) * w_ext
}
