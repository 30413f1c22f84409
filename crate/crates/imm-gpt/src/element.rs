//! Scalar abstraction so every kernel in the crate can run in f32 (training)
//! or f64 (gradient verification) without duplicating code.

use std::fmt::{Debug, Display};

/// Floating-point scalar used by tensors. The two implementations are `f32`
/// and `f64`; everything numeric in the crate is generic over this.
pub trait Element: num_traits::Float + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C = alpha * A * B + beta * C, row-major with explicit strides.
    /// Dispatches to the precision-matched BLAS-style kernel.
    ///
    /// # Safety
    /// `a`, `b` and `c` must point to allocations valid for the matrix
    /// extents implied by `m`, `k`, `n` and the strides, with `c` writable
    /// and non-overlapping with `a` and `b`.
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

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Shorthand for lifting an f64 constant into the working precision.
#[inline]
pub fn c<E: Element>(x: f64) -> E {
    E::from_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_f64() {
        assert_eq!(<f32 as Element>::from_f64(1.5).to_f64(), 1.5);
        assert_eq!(<f64 as Element>::from_f64(-0.25).to_f64(), -0.25);
    }

    #[test]
    fn gemm_matches_hand_multiplication() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        unsafe {
            f64::gemm(
                2, 2, 2, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 2, 1, 0.0, out.as_mut_ptr(), 2, 1,
            );
        }
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0f32, 0.0, 0.0, 1.0];
        let b = [2.0f32, 0.0, 0.0, 2.0];
        let mut out = [10.0f32, 0.0, 0.0, 10.0];
        unsafe {
            f32::gemm(
                2, 2, 2, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 2, 1, 1.0, out.as_mut_ptr(), 2, 1,
            );
        }
        assert_eq!(out, [12.0, 0.0, 0.0, 12.0]);
    }

    #[test]
    fn gemm_transposed_view_via_strides() {
        // A^T * B where A is stored row-major [2x3]: pass rsa=1, csa=3.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [[1,2,3],[4,5,6]]
        let b = [1.0f64, 1.0]; // column vector [2x1]
        let mut out = [0.0f64; 3]; // A^T (3x2) * b (2x1) = [5, 7, 9]
        unsafe {
            f64::gemm(
                3, 2, 1, 1.0, a.as_ptr(), 1, 3, b.as_ptr(), 1, 1, 0.0, out.as_mut_ptr(), 1, 1,
            );
        }
        assert_eq!(out, [5.0, 7.0, 9.0]);
    }
}
