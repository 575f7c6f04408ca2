//! Element type abstraction: f32 for training runs, f64 for gradient checks.

/// Floating-point element of the tensor engine.
///
/// `exp_fast` / `tanh_fast` are allowed to trade a couple of ulps for speed
/// in f32 (softmax and gelu dominate the non-gemm time of a training step);
/// the f64 implementations defer to libm so gradient checks see full
/// precision.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn ln(self) -> Self;
    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;

    /// C = alpha * A(m x k) * B(k x n) + beta * C(m x n), arbitrary strides.
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

/// Polynomial expf (Cephes coefficients), ~2 ulp over the clamped range.
///
/// Branch-free and free of float->int casts (Rust's saturating `as i32`
/// lowers to per-lane scalar code and blocks vectorization): the rounded
/// integer n is read straight out of the mantissa bits of z + 1.5 * 2^23.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let z = x * LOG2E;
    let shifted = z + MAGIC;
    let n = shifted - MAGIC;
    // bits(shifted) = bits(MAGIC) + round(z), so the exponent field of 2^n
    // is plain integer arithmetic on the raw bits
    let two_n = f32::from_bits(
        (shifted.to_bits().wrapping_sub(MAGIC.to_bits()).wrapping_add(127)) << 23,
    );
    let mut r = x - n * LN2_HI;
    r -= n * LN2_LO;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5.000_000_1e-1;
    let p = p * r * r + r + 1.0;
    p * two_n
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        // branch-free so elementwise loops vectorize; the clamp saturates
        // exp and the quotient lands on +-1 exactly
        let x = self.clamp(-9.0, 9.0);
        let t = exp_f32(2.0 * x);
        (t - 1.0) / (t + 1.0)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
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

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp_fast(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std_to_single_precision() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let got = x.exp_fast();
            let want = x.exp();
            let rel = ((got - want) / want.max(f32::MIN_POSITIVE)).abs();
            assert!(rel < 1e-5, "exp({x}): got {got}, want {want}");
            x += 0.0173;
        }
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut x = -12.0f32;
        while x < 12.0 {
            let got = x.tanh_fast();
            let want = x.tanh();
            assert!((got - want).abs() < 2e-6, "tanh({x}): got {got}, want {want}");
            x += 0.0137;
        }
    }
}
