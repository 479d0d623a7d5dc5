//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape plus a flat
//! buffer, and a [`Tape`] records the ops of one forward pass so that
//! [`Tape::backward`] can replay them in reverse. Everything downstream
//! (training, attacks, explanations) is built from the handful of ops
//! defined here.
//!
//! Element types are abstracted behind [`Elem`] so the whole stack runs in
//! `f32` (the default) or `f64` (used by the gradient-check oracles).

mod fd;
pub mod gradcheck;
pub(crate) mod ops;
mod tape;

use std::fmt::{Debug, Display};

pub use fd::finite_difference_gradient;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`]: `f32` or `f64`.
///
/// Extends [`num_traits::Float`] with exact `f64` conversions and a matrix
/// multiply dispatched to `matrixmultiply`'s single-threaded kernels, which
/// keeps results bit-reproducible across runs.
pub trait Elem:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A(m×k) · B(k×n) + beta * C`, with explicit row/column
    /// strides so transposed views need no copies. Strides must be
    /// non-negative and the buffers large enough for the strided extents;
    /// the safe wrapper [`ops::gemm_into`] checks this.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Largest index a stride pair can address for a `rows × cols` view.
fn strided_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    debug_assert!(rs >= 0 && cs >= 0);
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_elem {
    ($ty:ty, $gemm:path) => {
        impl Elem for $ty {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(m > 0 && k > 0 && n > 0, "gemm dimensions must be positive");
                assert!(a.len() >= strided_extent(m, k, rsa, csa));
                assert!(b.len() >= strided_extent(k, n, rsb, csb));
                assert!(c.len() >= strided_extent(m, n, rsc, csc));
                // Bounds established above; matrixmultiply only touches the
                // strided extents.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

/// N-dimensional array in row-major order. Scalars have an empty shape and a
/// single element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    /// Builds a tensor, rejecting shape/length mismatches and zero extents.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} implies {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    /// True for tensors holding exactly one element, whatever the rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "item",
                format!("expected a scalar, got shape {:?}", self.shape),
            ))
        }
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} elements as {shape:?}",
                    self.data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Lossless element-wise conversion through `f64`.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element, zero for the (impossible) empty case.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
