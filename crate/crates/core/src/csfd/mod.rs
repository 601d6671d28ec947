//! Complex-step differentiation.
//!
//! A value is "promoted" by attaching an imaginary perturbation `h` to one (or,
//! for second derivatives, two) input variables. Running the ordinary program on
//! the promoted type carries the perturbation through every operation, and the
//! derivative is read back from the imaginary channel divided by `h` (or `h²`
//! for the mixed `i₁i₂` channel of a bicomplex number).
//!
//! All arithmetic here is the linearized form: products of two imaginary
//! quantities that would feed back into the real part are discarded, so the
//! real part of any promoted computation is bit-identical to the plain `f64`
//! computation.

mod bicomplex;
mod complex;
mod scalar;

pub use bicomplex::BicomplexScalar;
pub use complex::{Complex, ComplexScalar};
pub use scalar::Scalar;

use thiserror::Error;

/// Default perturbation magnitude.
pub const DEFAULT_STEP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsfdError {
    #[error("non-finite input {0}")]
    InvalidInput(f64),
    #[error("step size {0} must satisfy 0 < h <= 1e-6")]
    InvalidStep(f64),
    #[error("division by a value with zero real part")]
    DivisionByZero,
    #[error("{func} is undefined at {x}")]
    Domain { func: &'static str, x: f64 },
}

/// Magnitude of the imaginary perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize(f64);

impl StepSize {
    pub fn new(h: f64) -> Result<Self, CsfdError> {
        if h.is_finite() && h > 0.0 && h <= 1e-6 {
            Ok(Self(h))
        } else {
            Err(CsfdError::InvalidStep(h))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for StepSize {
    fn default() -> Self {
        Self(DEFAULT_STEP)
    }
}

/// Which imaginary unit receives a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    None,
    First,
    Second,
}

/// Promote a real number to a complex scalar. The single-channel type has no
/// second unit, so [`Channel::Second`] leaves it unperturbed.
pub fn promote(x: f64, channel: Channel, h: StepSize) -> Result<ComplexScalar, CsfdError> {
    if !x.is_finite() {
        return Err(CsfdError::InvalidInput(x));
    }
    Ok(match channel {
        Channel::First => ComplexScalar::new(x, h.get()),
        Channel::None | Channel::Second => ComplexScalar::new(x, 0.0),
    })
}

/// Promote a real number to a bicomplex scalar, seeding the requested unit.
pub fn promote_bicomplex(x: f64, channel: Channel, h: StepSize) -> Result<BicomplexScalar, CsfdError> {
    if !x.is_finite() {
        return Err(CsfdError::InvalidInput(x));
    }
    Ok(BicomplexScalar::from(x).seeded(channel, h))
}

/// First derivative carried by a complex result.
#[inline]
pub fn extract_derivative(z: ComplexScalar, h: StepSize) -> f64 {
    z.im / h.get()
}

/// Second (mixed) derivative carried by the `i₁i₂` coefficient.
#[inline]
pub fn extract_hessian_entry(z: BicomplexScalar, h: StepSize) -> f64 {
    z.im12 / (h.get() * h.get())
}

/// Elementary functions with a checked real domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementary {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Arccos,
    Abs,
}

pub fn elementary<S: Scalar>(f: Elementary, z: S) -> Result<S, CsfdError> {
    let x = z.re();
    let (name, ok) = match f {
        Elementary::Log => ("log", x > 0.0),
        Elementary::Sqrt => ("sqrt", x >= 0.0),
        Elementary::Arccos => ("arccos", (-1.0..=1.0).contains(&x)),
        Elementary::Tan => ("tan", x.cos() != 0.0),
        _ => ("", true),
    };
    if !x.is_finite() {
        return Err(CsfdError::InvalidInput(x));
    }
    if !ok {
        return Err(CsfdError::Domain { func: name, x });
    }
    Ok(match f {
        Elementary::Exp => z.exp(),
        Elementary::Log => z.ln(),
        Elementary::Sqrt => z.sqrt(),
        Elementary::Sin => z.sin(),
        Elementary::Cos => z.cos(),
        Elementary::Tan => z.tan(),
        Elementary::Arccos => z.acos(),
        Elementary::Abs => z.abs(),
    })
}

/// Checked power `z^p` for a real exponent.
pub fn pow<S: Scalar>(z: S, p: f64) -> Result<S, CsfdError> {
    let x = z.re();
    if x < 0.0 && p.fract() != 0.0 {
        return Err(CsfdError::Domain { func: "pow", x });
    }
    Ok(z.powf(p))
}

/// Checked division.
pub fn div<S: Scalar>(a: S, b: S) -> Result<S, CsfdError> {
    if b.re() == 0.0 {
        return Err(CsfdError::DivisionByZero);
    }
    Ok(a / b)
}

/// Derivative of a scalar function at `x` by a single complex-step pass.
pub fn derivative<F>(f: F, x: f64, h: StepSize) -> f64
where
    F: Fn(ComplexScalar) -> ComplexScalar,
{
    extract_derivative(f(ComplexScalar::new(x, h.get())), h)
}

/// Gradient of `f: Rⁿ → R` with one complex pass per coordinate.
pub fn gradient<F>(f: F, x: &[f64], h: StepSize) -> Vec<f64>
where
    F: Fn(&[ComplexScalar]) -> ComplexScalar,
{
    let mut args: Vec<ComplexScalar> = x.iter().map(|&v| ComplexScalar::from(v)).collect();
    (0..x.len())
        .map(|i| {
            args[i].im = h.get();
            let g = extract_derivative(f(&args), h);
            args[i].im = 0.0;
            g
        })
        .collect()
}

/// Gradient and Hessian of `f: Rⁿ → R` from the `n(n+1)/2` bicomplex seedings
/// of the upper triangle. The diagonal seedings also supply the gradient.
pub fn gradient_hessian<F>(f: F, x: &[f64], h: StepSize) -> (Vec<f64>, Vec<Vec<f64>>)
where
    F: Fn(&[BicomplexScalar]) -> BicomplexScalar,
{
    let n = x.len();
    let base: Vec<BicomplexScalar> = x.iter().map(|&v| BicomplexScalar::from(v)).collect();
    let mut grad = vec![0.0; n];
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut args = base.clone();
            args[i] = args[i].seeded(Channel::First, h);
            args[j] = args[j].seeded(Channel::Second, h);
            let z = f(&args);
            let hij = extract_hessian_entry(z, h);
            hess[i][j] = hij;
            hess[j][i] = hij;
            if i == j {
                grad[i] = z.im1 / h.get();
            }
        }
    }
    (grad, hess)
}
