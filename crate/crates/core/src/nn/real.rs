//! Scalar abstraction so the same network code runs in `f32` for training and
//! `f64` for finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + FromPrimitive
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
    /// Raw strided gemm: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// dimensions; `c` must not alias `a` or `b`.
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

    /// Elementwise `exp` over a slice.
    fn exp_slice(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    #[inline]
    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

impl Real for f32 {
    /// Branch-free polynomial exp (Cephes coefficients) that vectorizes;
    /// relative error around 2e-7. Inputs are clamped to `[-87, 88]`.
    fn exp_slice(xs: &mut [f32]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
        const C1: f32 = 0.693_359_4;
        const C2: f32 = -2.121_944_4e-4;
        for x in xs {
            let v = x.clamp(-87.0, 88.0);
            let n = (v * LOG2E + ROUND) - ROUND;
            let r = v - n * C1 - n * C2;
            let mut p = 1.987_569_1e-4f32;
            p = p * r + 1.398_199_9e-3;
            p = p * r + 8.333_452e-3;
            p = p * r + 4.166_579_6e-2;
            p = p * r + 1.666_666_5e-1;
            p = p * r + 5e-1;
            let e = p * r * r + r + 1.0;
            let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
            *x = e * scale;
        }
    }

    unsafe fn gemm_raw(
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

impl Real for f64 {
    unsafe fn gemm_raw(
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

/// A borrowed strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, R> {
    pub data: &'a [R],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R: Real> View<'a, R> {
    /// Row-major dense `rows x cols` matrix.
    pub fn dense(data: &'a [R], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-block view with an explicit row stride (columns contiguous).
    pub fn strided(data: &'a [R], rows: usize, cols: usize, rs: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `C = alpha * A B + beta * C` where `C` is written through a strided view
/// with contiguous columns and row stride `rsc`.
pub fn gemm<R: Real>(alpha: R, a: View<'_, R>, b: View<'_, R>, beta: R, c: &mut [R], rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v = if beta == R::zero() { R::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: bounds were checked above, and `c` is a unique borrow so it
    // cannot alias `a` or `b`.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Dense `A B` for row-major inputs.
pub fn matmul<R: Real>(a: View<'_, R>, b: View<'_, R>) -> Vec<R> {
    let mut out = vec![R::zero(); a.rows * b.cols];
    gemm(R::one(), a, b, R::zero(), &mut out, b.cols);
    out
}

pub fn all_finite<R: Real>(xs: &[R]) -> bool {
    xs.iter().all(|v| v.is_finite())
}
