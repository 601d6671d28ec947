use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, One, Zero};

use super::Scalar;

/// Complex number with linearized arithmetic: `re` is the function value and
/// `im` the first-order perturbation. Generic over the float width so the
/// single-precision behavior can be measured; the pipeline uses
/// [`ComplexScalar`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex<T> {
    pub re: T,
    pub im: T,
}

pub type ComplexScalar = Complex<f64>;

impl<T: Float> Complex<T> {
    #[inline]
    pub const fn new(re: T, im: T) -> Self {
        Self { re, im }
    }

    #[inline]
    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, e * self.im)
    }

    /// The imaginary channel is expected to stay `O(h)`; a large ratio points
    /// at a perturbation-magnitude bug.
    pub fn perturbation_is_small(self) -> bool {
        self.im.abs() <= T::from(1e-3).unwrap() * (self.re.abs() + T::one())
    }
}

impl From<f64> for ComplexScalar {
    #[inline]
    fn from(re: f64) -> Self {
        Self { re, im: 0.0 }
    }
}

impl Scalar for ComplexScalar {
    #[inline]
    fn re(self) -> f64 {
        self.re
    }

    #[inline]
    fn lift(self, f0: f64, f1: f64, _f2: f64) -> Self {
        Self { re: f0, im: f1 * self.im }
    }

    #[inline]
    fn with_re(self, re: f64) -> Self {
        Self { re, im: self.im }
    }

    #[inline]
    fn is_perturbed(self) -> bool {
        self.im != 0.0
    }

    #[inline]
    fn from_re_im(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    #[inline]
    fn im(self) -> f64 {
        self.im
    }
}

impl<T: Float> Zero for Complex<T> {
    #[inline]
    fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    #[inline]
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }
}

impl<T: Float> One for Complex<T> {
    #[inline]
    fn one() -> Self {
        Self::new(T::one(), T::zero())
    }
}

impl<T: Float> Add for Complex<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

impl<T: Float> Sub for Complex<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
}

impl<T: Float> Mul for Complex<T> {
    type Output = Self;
    /// `(a₁ + b₁i)(a₂ + b₂i) ≈ a₁a₂ + (a₁b₂ + a₂b₁)i`
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.im + o.re * self.im)
    }
}

impl<T: Float> Div for Complex<T> {
    type Output = Self;
    /// `(a₁ + b₁i)/(a₂ + b₂i) ≈ a₁/a₂ + (b₁a₂ − a₁b₂)/a₂² i`
    #[inline]
    fn div(self, o: Self) -> Self {
        Self::new(self.re / o.re, (self.im * o.re - self.re * o.im) / (o.re * o.re))
    }
}

impl<T: Float> Neg for Complex<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.im)
    }
}

impl<T: Float> Add<T> for Complex<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: T) -> Self {
        Self::new(self.re + o, self.im)
    }
}

impl<T: Float> Sub<T> for Complex<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: T) -> Self {
        Self::new(self.re - o, self.im)
    }
}

impl<T: Float> Mul<T> for Complex<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: T) -> Self {
        Self::new(self.re * o, self.im * o)
    }
}

impl<T: Float> Div<T> for Complex<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: T) -> Self {
        Self::new(self.re / o, self.im / o)
    }
}

impl<T: Float> AddAssign for Complex<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Float> SubAssign for Complex<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Float> MulAssign for Complex<T> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Float> DivAssign for Complex<T> {
    #[inline]
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}
