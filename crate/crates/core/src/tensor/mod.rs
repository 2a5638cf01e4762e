//! Dense tensors and the reverse-mode differentiation engine.
//!
//! Tensors are plain row-major buffers tagged with a [`Shape`]. Activations
//! use the 4-axis `(S, C, H, W)` layout (slices, channels, height, width);
//! parameters keep their natural rank. The engine is generic over [`Real`]
//! so that the same operations run in `f32` for training and in `f64` for
//! finite-difference verification.

mod basic;
pub mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Backward, Graph, Var};

/// Floating-point element type usable by the engine.
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// `c (+)= op(a) · op(b)` for dense row-major matrices, where `op(a)` is
    /// `m × k` and `op(b)` is `k × n`. With `trans_a` the buffer `a` holds the
    /// `k × m` matrix, likewise for `b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, column stride) of op(X) for a row-major buffer X
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn into_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every index reachable
                // through (m, k, n) and the strides lies inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Ordered list of positive dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Dimensions as `(S, C, H, W)`; fails unless the shape has rank 4.
    pub fn as_scwh(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [s, c, h, w] => Ok((s, c, h, w)),
            _ => Err(Error::shape(op, format!("expected (S,C,H,W), got {:?}", self.0))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// How [`Tensor::new`] fills a freshly created tensor.
#[derive(Clone, Debug)]
pub enum Init<T> {
    Fill(T),
    Values(Vec<T>),
    /// Uniform on `[low, high)` from a ChaCha8 stream seeded with `seed`.
    SeededUniform { low: f64, high: f64, seed: u64 },
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, init: Init<T>) -> Result<Self> {
        let n = shape.numel();
        let data = match init {
            Init::Fill(v) => vec![v; n],
            Init::Values(values) => {
                if values.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        actual: values.len(),
                    });
                }
                values
            }
            Init::SeededUniform { low, high, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| T::from_f64_lossy(low + (high - low) * rng.random::<f64>()))
                    .collect()
            }
        };
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(dims)?, Init::Values(data))
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(Shape::new(dims)?, Init::Fill(T::zero()))
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        Self::new(Shape::new(dims)?, Init::Fill(value))
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn seeded_uniform(dims: impl Into<Vec<usize>>, low: f64, high: f64, seed: u64) -> Result<Self> {
        Self::new(Shape::new(dims)?, Init::SeededUniform { low, high, seed })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Explicitly clears the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.dims().to_vec()))
        }
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::LengthMismatch {
                expected: shape.numel(),
                actual: self.numel(),
            });
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.into_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
