//! Floating-point scalar abstraction shared by the network code.
//!
//! Training runs in `f32`; gradient checks run the same graphs in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Row and column strides of a matrix operand, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major layout with `cols` columns.
    pub const fn rows(cols: usize) -> Self {
        Strides {
            row: cols as isize,
            col: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        Strides {
            row: 1,
            col: cols as isize,
        }
    }
}

pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * a(m×k) · b(k×n) + beta * c`.
    ///
    /// Operand layouts are described by strides, so transposed views need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );

    /// Runs `f` on a reusable per-thread buffer; `slot` picks one of a few.
    fn with_scratch<R>(slot: usize, f: impl FnOnce(&mut Vec<Self>) -> R) -> R;
}

#[inline]
fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * s.row + (cols - 1) as isize * s.col) as usize + 1
}

const SCRATCH_SLOTS: usize = 2;

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn with_scratch<R>(slot: usize, f: impl FnOnce(&mut Vec<Self>) -> R) -> R {
                thread_local! {
                    static BUF: [std::cell::RefCell<Vec<$t>>; SCRATCH_SLOTS] = Default::default();
                }
                BUF.with(|b| f(&mut b[slot].borrow_mut()))
            }

            #[inline(always)]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                beta: Self,
                c: &mut [Self],
                sc: Strides,
            ) {
                assert!(sa.row >= 0 && sa.col >= 0 && sb.row >= 0 && sb.col >= 0);
                assert!(sc.row >= 0 && sc.col >= 0);
                assert!(a.len() >= span(m, k, sa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, sb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, sc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every strided access stays in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.row,
                        sa.col,
                        b.as_ptr(),
                        sb.row,
                        sb.col,
                        beta,
                        c.as_mut_ptr(),
                        sc.row,
                        sc.col,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
