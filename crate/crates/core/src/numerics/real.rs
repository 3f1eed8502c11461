//! Scalar abstraction shared by the 32-bit training path and the 64-bit
//! gradient-check path, plus the strided GEMM entry point.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a [`Tensor`](super::Tensor).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// # Safety
    /// Every index reachable through the given offsets and strides must be in
    /// bounds of the underlying allocations; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Offset and strides of a matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major matrix with `cols` columns starting at `off`.
    pub fn rows(off: usize, cols: usize) -> Self {
        View { off, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn trans(off: usize, cols: usize) -> Self {
        View { off, rs: 1, cs: cols }
    }

    pub fn strided(off: usize, rs: usize, cs: usize) -> Self {
        View { off, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c ← alpha · a·b + beta · c` on strided views, `a` is `m×k`, `b` is `k×n`.
///
/// Panics when a view reaches outside its buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(vc.last(m, n) < c.len(), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = vc.off + i * vc.rs + j * vc.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(va.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(vb.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    // SAFETY: the three asserts above bound every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposed_views() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, View::rows(0, 3), &b, View::rows(0, 4), 0.0, &mut c, View::rows(0, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) times c (2x4)
        let mut d = vec![0.0; 12];
        gemm(3, 2, 4, 1.0, &a, View::trans(0, 3), &c, View::rows(0, 4), 0.0, &mut d, View::rows(0, 4));
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
