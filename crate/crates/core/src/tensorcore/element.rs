//! Scalar abstraction shared by the f32 training path and f64 checker path.

use num_traits::Float;

/// Floating-point scalar a [`super::Tape`] can run on.
///
/// Beyond the `Float` arithmetic surface this adds lossless-ish conversions
/// and a matrix-multiply kernel dispatch, so generic code never needs to
/// know which width it is running at.
pub trait Element: Float + Copy + Default + std::fmt::Debug + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    // named to avoid clashing with ToPrimitive's Option-returning casts
    fn cast_f32(self) -> f32;
    fn cast_f64(self) -> f64;

    /// `exp` for bulk softmax lanes. The f32 impl is a branch-free
    /// polynomial (≈2 ulp, auto-vectorizes); f64 defers to libm since the
    /// wide path only runs in small verification graphs.
    fn exp_lane(self) -> Self {
        self.exp()
    }

    /// `c = alpha * a @ b + beta * c` with explicit strides, row-major layout.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dims and strides;
    /// `c` must not alias `a` or `b`.
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
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }

    #[inline]
    fn exp_lane(self) -> Self {
        // 2^n * P(r) split, Cephes single-precision coefficients
        const LOG2E: f32 = 1.442_695_04;
        const LN2_HI: f32 = 0.693_359_375;
        const LN2_LO: f32 = -2.121_944_4e-4;
        let x = self.clamp(-87.3, 88.0);
        let n = (x * LOG2E).round();
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut y = 1.987_569_2e-4f32;
        y = y * r + 1.398_199_9e-3;
        y = y * r + 8.333_452e-3;
        y = y * r + 4.166_579_6e-2;
        y = y * r + 1.666_666_5e-1;
        y = y * r + 5.000_000_1e-1;
        y = y * r * r + r + 1.0;
        let pow2 = f32::from_bits((((n as i32) + 127) << 23) as u32);
        y * pow2
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn cast_f32(self) -> f32 {
        self
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self as f64
    }

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
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn cast_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self
    }

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
