use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

use super::{Channel, Scalar, StepSize};

/// Bicomplex number `re + im1·i₁ + im2·i₂ + im12·i₁i₂`.
///
/// Products keep the `i₁i₂` cross terms and drop `i₁²`, `i₂²` and every term of
/// perturbation order three or more, so the real part never sees the
/// perturbation and `im12 / h²` is the second derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BicomplexScalar {
    pub re: f64,
    pub im1: f64,
    pub im2: f64,
    pub im12: f64,
}

impl BicomplexScalar {
    #[inline]
    pub const fn new(re: f64, im1: f64, im2: f64, im12: f64) -> Self {
        Self { re, im1, im2, im12 }
    }

    /// Add `h` to the chosen imaginary unit. Seeding the same variable on both
    /// units gives the diagonal Hessian entry.
    #[inline]
    pub fn seeded(mut self, channel: Channel, h: StepSize) -> Self {
        match channel {
            Channel::First => self.im1 += h.get(),
            Channel::Second => self.im2 += h.get(),
            Channel::None => {}
        }
        self
    }
}

impl From<f64> for BicomplexScalar {
    #[inline]
    fn from(re: f64) -> Self {
        Self::new(re, 0.0, 0.0, 0.0)
    }
}

impl Scalar for BicomplexScalar {
    #[inline]
    fn re(self) -> f64 {
        self.re
    }

    #[inline]
    fn lift(self, f0: f64, f1: f64, f2: f64) -> Self {
        Self::new(f0, f1 * self.im1, f1 * self.im2, f2 * self.im1 * self.im2 + f1 * self.im12)
    }

    #[inline]
    fn with_re(self, re: f64) -> Self {
        Self { re, ..self }
    }

    #[inline]
    fn is_perturbed(self) -> bool {
        self.im1 != 0.0 || self.im2 != 0.0 || self.im12 != 0.0
    }

    #[inline]
    fn from_re_im(re: f64, im: f64) -> Self {
        Self::new(re, im, 0.0, 0.0)
    }

    #[inline]
    fn im(self) -> f64 {
        self.im1
    }
}

impl Zero for BicomplexScalar {
    #[inline]
    fn zero() -> Self {
        Self::from(0.0)
    }

    #[inline]
    fn is_zero(&self) -> bool {
        *self == Self::zero()
    }
}

impl One for BicomplexScalar {
    #[inline]
    fn one() -> Self {
        Self::from(1.0)
    }
}

impl Add for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im1 + o.im1, self.im2 + o.im2, self.im12 + o.im12)
    }
}

impl Sub for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im1 - o.im1, self.im2 - o.im2, self.im12 - o.im12)
    }
}

impl Mul for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re,
            self.re * o.im1 + self.im1 * o.re,
            self.re * o.im2 + self.im2 * o.re,
            self.re * o.im12 + self.im12 * o.re + self.im1 * o.im2 + self.im2 * o.im1,
        )
    }
}

impl Div for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let x = o.re;
        let inv = o.lift(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x));
        // keep the real part an exact quotient
        (self * inv).with_re(self.re / o.re)
    }
}

impl Neg for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.im1, -self.im2, -self.im12)
    }
}

impl Add<f64> for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Self { re: self.re + o, ..self }
    }
}

impl Sub<f64> for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Self { re: self.re - o, ..self }
    }
}

impl Mul<f64> for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        Self::new(self.re * o, self.im1 * o, self.im2 * o, self.im12 * o)
    }
}

impl Div<f64> for BicomplexScalar {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        Self::new(self.re / o, self.im1 / o, self.im2 / o, self.im12 / o)
    }
}

impl AddAssign for BicomplexScalar {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for BicomplexScalar {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for BicomplexScalar {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl DivAssign for BicomplexScalar {
    #[inline]
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}
