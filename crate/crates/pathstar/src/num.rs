use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar the engine runs on. Training and evaluation use `f32`; gradient
/// checks instantiate every op in `f64`, where central finite differences
/// resolve ~10 significant digits.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Bulk-elementwise tanh. `f64` is the exact libm call (gradient checks
    /// and the chain-rule identity run in f64 and need full precision);
    /// `f32` is a clamped rational approximation within 1e-6 of libm that
    /// the compiler can vectorize, because libm `tanhf` alone otherwise
    /// dominates the MLP activation cost.
    fn tanh_fast(self) -> Self;

    /// `c = alpha * a @ b + beta * c` for row-major contiguous
    /// `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    /// General strided `c = alpha * a @ b + beta * c`: element `(i, j)` of an
    /// operand lives at `i * rs + j * cs`. Lets backward passes multiply by
    /// transposed views without materializing them. Strides must be
    /// non-negative and every addressed element must be in bounds.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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

/// Rational tanh approximation (odd numerator over even denominator in x²),
/// clamped where |tanh| saturates in f32. Max absolute error vs libm is
/// about 1e-7 on the clamped range; NaN propagates.
#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311_5;
    const A1: f32 = 4.893_524_6e-3;
    const A3: f32 = 6.372_619_3e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297_1e-8;
    const A9: f32 = -8.604_671_5e-11;
    const A11: f32 = 2.000_187_9e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525_2e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347_1e-4;
    const B6: f32 = 1.198_258_4e-6;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let p = x * (A1 + x2 * (A3 + x2 * (A5 + x2 * (A7 + x2 * (A9 + x2 * (A11 + x2 * A13))))));
    let q = B0 + x2 * (B2 + x2 * (B4 + x2 * B6));
    p / q
}

#[inline]
fn exact_tanh_f64(x: f64) -> f64 {
    x.tanh()
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $tanh_fast:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn tanh_fast(self) -> Self {
                $tanh_fast(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm lhs buffer length");
                assert_eq!(b.len(), k * n, "gemm rhs buffer length");
                assert_eq!(c.len(), m * n, "gemm out buffer length");
                if m == 0 || k == 0 || n == 0 {
                    if beta == 0.0 {
                        c.fill(0.0);
                    } else if beta != 1.0 {
                        for x in c.iter_mut() {
                            *x *= beta;
                        }
                    }
                    return;
                }
                // Buffers are exactly-sized row-major slices, checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        n as isize,
                        1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn gemm_strided(
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
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let o = (i as isize * rsc + j as isize * csc) as usize;
                            c[o] = if beta == 0.0 { 0.0 } else { c[o] * beta };
                        }
                    }
                    return;
                }
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> isize {
                    (rows - 1) as isize * rs + (cols - 1) as isize * cs
                };
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(extent(m, k, rsa, csa) < a.len() as isize, "gemm lhs extent");
                assert!(extent(k, n, rsb, csb) < b.len() as isize, "gemm rhs extent");
                assert!(extent(m, n, rsc, csc) < c.len() as isize, "gemm out extent");
                // Extents checked above; operands may alias nothing (a/b are
                // shared refs, c is exclusive).
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

impl_real!(f32, matrixmultiply::sgemm, fast_tanh_f32);
impl_real!(f64, matrixmultiply::dgemm, exact_tanh_f64);
