//! Dense rank-4 tensors in sample×channel×height×width layout, with the op
//! set the backbone needs and reverse-mode differentiation through every op.
//!
//! Storage is `f32` by default; every op is generic over [`Scalar`] so the
//! whole stack can also run in `f64`, which the gradient checker uses.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

mod gradcheck;
pub mod ops;
mod params;
mod rng;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi, grad_check_params, weighted_readout, GradCheckReport};
pub use ops::{
    activation, concat_channels, conv2d, cross_entropy_smoothed, elementwise, linear,
    norm_channels, slice_channels, spatial_mean, split_channels, sum_all, Activation, BinaryKind,
    ConvSpec,
};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
    fn abs_val(self) -> Self;
    fn sqrt_val(self) -> Self;
    fn exp_val(self) -> Self;
    fn ln_val(self) -> Self;
    fn max_val(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn abs_val(self) -> Self {
        self.abs()
    }
    fn sqrt_val(self) -> Self {
        self.sqrt()
    }
    fn exp_val(self) -> Self {
        self.exp()
    }
    fn ln_val(self) -> Self {
        self.ln()
    }
    fn max_val(self, other: Self) -> Self {
        self.max(other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
    fn abs_val(self) -> Self {
        self.abs()
    }
    fn sqrt_val(self) -> Self {
        self.sqrt()
    }
    fn exp_val(self) -> Self {
        self.exp()
    }
    fn ln_val(self) -> Self {
        self.ln()
    }
    fn max_val(self, other: Self) -> Self {
        self.max(other)
    }
}

/// Errors produced by tensor construction, ops and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got {shape}")]
    NonScalarOutput { shape: String },
    #[error("variable #{index} is not on this tape (len {len})")]
    InvalidVar { index: usize, len: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Extents of a rank-4 tensor: (N, C, H, W), W fastest-varying.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    /// Flat offset of element (n, c, h, w) in row-major order.
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
    pub fn is_scalar(&self) -> bool {
        self.0 == [1, 1, 1, 1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Dense rank-4 array. Cloning is cheap (shared storage); mutation
/// copies-on-write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![S::ZERO; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![v; shape.numel()]),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::full(Shape([1, 1, 1, 1]), v)
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::<Vec<S>>::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.shape.offset(n, c, h, w);
        self.data_mut()[i] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    /// In-place elementwise add of a same-shape tensor.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn scale_in_place(&mut self, k: S) {
        for v in self.data_mut() {
            *v = *v * k;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_offsets_are_row_major_w_fastest() {
        let s = Shape([2, 3, 4, 5]);
        assert_eq!(s.offset(0, 0, 0, 0), 0);
        assert_eq!(s.offset(0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 1, 0), 5);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
        assert_eq!(s.offset(1, 0, 0, 0), 60);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = Tensor::from_vec(Shape([1, 1, 2, 2]), vec![1.0f32, 2.0, 3.0]);
        assert!(matches!(r, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn clone_is_shared_until_mutated() {
        let a = Tensor::from_vec(Shape([1, 1, 1, 3]), vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        b.set(0, 0, 0, 1, 9.0);
        assert_eq!(a.at(0, 0, 0, 1), 2.0);
        assert_eq!(b.at(0, 0, 0, 1), 9.0);
    }
}
