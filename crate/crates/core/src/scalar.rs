//! Floating-point abstraction shared by the exact solvers and the network code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive};

/// Real scalar used by the solver and network code.
///
/// Implemented for `f32` and `f64`. Text formats rely on `Display` producing
/// the shortest representation that parses back to the same value.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + FromStr + Default + Send + Sync + 'static
{
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `C ← α·A·B + β·C` for an `m×k` matrix `A`, a `k×n` matrix `B` and an
    /// `m×n` matrix `C`, each described by a slice and its (row, column)
    /// strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Strided<Self>, b: Strided<Self>, beta: Self, c: StridedMut<Self>);
}

/// Read-only matrix view: data plus row and column strides.
#[derive(Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

pub struct StridedMut<'a, T> {
    pub data: &'a mut [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Strided<Self>, b: Strided<Self>, beta: Self, c: StridedMut<Self>) {
                assert!(a.data.len() >= extent(m, k, a.row_stride, a.col_stride), "A view out of bounds");
                assert!(b.data.len() >= extent(k, n, b.row_stride, b.col_stride), "B view out of bounds");
                assert!(c.data.len() >= extent(m, n, c.row_stride, c.col_stride), "C view out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every addressed element inside
                // the borrowed slices, and `c` is exclusively borrowed.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

/// Index of the largest value; ties (values within `tol` of the maximum) go to
/// the lowest index. Returns `None` for an empty slice.
pub fn argmax_lowest<T: Scalar>(values: &[T], tol: T) -> Option<usize> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<T>, v| match acc {
            Some(m) if m >= v => Some(m),
            _ => Some(v),
        })?;
    values.iter().position(|&v| v >= max - tol)
}
