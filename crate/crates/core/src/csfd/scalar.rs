use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

/// Number type the pipeline is generic over: plain `f64`, or one of the
/// promoted types carrying perturbation channels.
///
/// Elementary functions are expressed through [`Scalar::lift`], which applies
/// a function given its value and first two derivatives at the real part.
/// Comparisons, `min`, `max` and `abs` look only at the real part, so control
/// flow is identical to the real-valued program.
pub trait Scalar:
    nalgebra::Scalar
    + Copy
    + Zero
    + One
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + Send
    + Sync
    + Debug
{
    /// Real part.
    fn re(self) -> f64;

    /// `f(self)` where `f0 = f(re)`, `f1 = f'(re)`, `f2 = f''(re)`.
    fn lift(self, f0: f64, f1: f64, f2: f64) -> Self;

    /// Replace the real part, keeping every perturbation channel.
    fn with_re(self, re: f64) -> Self;

    /// Whether any perturbation channel is nonzero.
    fn is_perturbed(self) -> bool;

    /// Value with `im` on the first perturbation channel (dropped by `f64`).
    fn from_re_im(re: f64, im: f64) -> Self;

    /// First perturbation channel.
    fn im(self) -> f64;

    #[inline]
    fn exp(self) -> Self {
        let e = self.re().exp();
        self.lift(e, e, e)
    }

    #[inline]
    fn ln(self) -> Self {
        let x = self.re();
        self.lift(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    #[inline]
    fn sqrt(self) -> Self {
        let x = self.re();
        let s = x.sqrt();
        self.lift(s, 0.5 / s, -0.25 / (s * x))
    }

    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.re().sin_cos();
        self.lift(s, c, -s)
    }

    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.re().sin_cos();
        self.lift(c, -s, -c)
    }

    #[inline]
    fn tan(self) -> Self {
        let t = self.re().tan();
        let d = 1.0 + t * t;
        self.lift(t, d, 2.0 * t * d)
    }

    #[inline]
    fn acos(self) -> Self {
        let x = self.re();
        let q = 1.0 - x * x;
        let sq = q.sqrt();
        self.lift(x.acos(), -1.0 / sq, -x / (q * sq))
    }

    #[inline]
    fn powf(self, p: f64) -> Self {
        let x = self.re();
        self.lift(x.powf(p), p * x.powf(p - 1.0), p * (p - 1.0) * x.powf(p - 2.0))
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        let x = self.re();
        let nf = n as f64;
        self.lift(x.powi(n), nf * x.powi(n - 1), nf * (nf - 1.0) * x.powi(n - 2))
    }

    /// Sign flip of every channel when the real part is negative; a zero real
    /// part passes through unchanged.
    #[inline]
    fn abs(self) -> Self {
        if self.re() < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Ties keep `self`.
    #[inline]
    fn min(self, other: Self) -> Self {
        if other.re() < self.re() {
            other
        } else {
            self
        }
    }

    /// Ties keep `self`.
    #[inline]
    fn max(self, other: Self) -> Self {
        if other.re() > self.re() {
            other
        } else {
            self
        }
    }

    #[inline]
    fn signum_re(self) -> f64 {
        let x = self.re();
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn re(self) -> f64 {
        self
    }

    #[inline]
    fn lift(self, f0: f64, _f1: f64, _f2: f64) -> Self {
        f0
    }

    #[inline]
    fn with_re(self, re: f64) -> Self {
        re
    }

    #[inline]
    fn is_perturbed(self) -> bool {
        false
    }

    #[inline]
    fn from_re_im(re: f64, _im: f64) -> Self {
        re
    }

    #[inline]
    fn im(self) -> f64 {
        0.0
    }
}
