//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive executed during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and fills
//! in the gradient of every node that requires one. Parameters live outside
//! the tape as plain [`Tensor`]s and are copied in as leaves once per step.

mod conv;
pub mod init;
pub mod io;
mod loss;
mod ops;
pub mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::Padding;
pub use loss::{softmax, PixelLoss};
pub use tape::{BackwardFn, Tape, Var};

/// Element type stored in `.ten` files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
}

/// Floating-point element type a tape can run on.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strides must describe valid in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `[m, k] x [k, n] -> [m, n]` on contiguous buffers, accumulating
/// into `out` when `accumulate` is set. `ta`/`tb` read the operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: strides describe the row-major (or transposed) layout of
    // buffers whose lengths were checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A shaped numeric array, optionally carrying a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    /// Same data, new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Converts the element type, dropping any gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
