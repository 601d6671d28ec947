//! Rigid motions over a generic scalar, with the exponential map written so
//! that perturbations seeded on twist components flow into the pose.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::csfd::{BicomplexScalar, Channel, ComplexScalar, Scalar, StepSize};

/// Below this squared angle the exponential map switches to Taylor forms.
const SMALL_ANGLE_SQ: f64 = 1e-14;

/// Lie-algebra coordinates `ξ = (φ, ρ)`: rotation vector then translation
/// parameter. Component indices 0..3 address `φ`, 3..6 address `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist<S: Scalar = f64> {
    pub phi: Vector3<S>,
    pub rho: Vector3<S>,
}

impl<S: Scalar> Twist<S> {
    pub fn new(phi: Vector3<S>, rho: Vector3<S>) -> Self {
        Self { phi, rho }
    }

    pub fn zero() -> Self {
        Self { phi: Vector3::zeros(), rho: Vector3::zeros() }
    }

    #[inline]
    pub fn get(&self, i: usize) -> S {
        if i < 3 {
            self.phi[i]
        } else {
            self.rho[i - 3]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: S) {
        if i < 3 {
            self.phi[i] = v;
        } else {
            self.rho[i - 3] = v;
        }
    }

    pub fn real(&self) -> Twist<f64> {
        Twist { phi: self.phi.map(|x| x.re()), rho: self.rho.map(|x| x.re()) }
    }
}

impl Twist<f64> {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { phi: Vector3::new(v[0], v[1], v[2]), rho: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.phi[0], self.phi[1], self.phi[2], self.rho[0], self.rho[1], self.rho[2])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn lift<T: Scalar>(&self) -> Twist<T> {
        Twist { phi: self.phi.map(T::from), rho: self.rho.map(T::from) }
    }

    /// Promote with `h` on component `i`.
    pub fn seed(&self, i: usize, h: StepSize) -> Twist<ComplexScalar> {
        let mut t: Twist<ComplexScalar> = self.lift();
        t.set(i, ComplexScalar::new(self.get(i), h.get()));
        t
    }

    /// Promote with `i₁` on component `i` and `i₂` on component `j`.
    pub fn seed_pair(&self, i: usize, j: usize, h: StepSize) -> Twist<BicomplexScalar> {
        let mut t: Twist<BicomplexScalar> = self.lift();
        t.set(i, t.get(i).seeded(Channel::First, h));
        t.set(j, t.get(j).seeded(Channel::Second, h));
        t
    }
}

impl<S: Scalar> std::ops::Neg for Twist<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { phi: -self.phi, rho: -self.rho }
    }
}

/// Rigid transform `x ↦ R x + t`. Camera poses map camera coordinates to
/// global coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3<S: Scalar = f64> {
    pub rot: Matrix3<S>,
    pub trans: Vector3<S>,
}

impl<S: Scalar> PoseSE3<S> {
    pub fn identity() -> Self {
        Self { rot: Matrix3::identity(), trans: Vector3::zeros() }
    }

    pub fn new(rot: Matrix3<S>, trans: Vector3<S>) -> Self {
        Self { rot, trans }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &PoseSE3<S>) -> PoseSE3<S> {
        PoseSE3 { rot: self.rot * other.rot, trans: self.rot * other.trans + self.trans }
    }

    pub fn inverse(&self) -> PoseSE3<S> {
        let rt = self.rot.transpose();
        PoseSE3 { rot: rt, trans: -(rt * self.trans) }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rot * p + self.trans
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<S>) -> Vector3<S> {
        self.rot * v
    }

    pub fn real(&self) -> PoseSE3<f64> {
        PoseSE3 { rot: self.rot.map(|x| x.re()), trans: self.trans.map(|x| x.re()) }
    }
}

impl PoseSE3<f64> {
    pub fn lift<T: Scalar>(&self) -> PoseSE3<T> {
        PoseSE3 { rot: self.rot.map(T::from), trans: self.trans.map(T::from) }
    }

    /// `exp(ξ) ∘ self`: the pose moved by a left-multiplied increment.
    pub fn perturbed<T: Scalar>(&self, xi: &Twist<T>) -> PoseSE3<T> {
        exp_map(xi).compose(&self.lift())
    }

    pub fn from_quaternion(t: Vector3<f64>, q: &UnitQuaternion<f64>) -> Self {
        Self { rot: q.to_rotation_matrix().into_inner(), trans: t }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&self.rot))
    }

    /// Frobenius norm of `RᵀR − I` and `det R`.
    pub fn orthonormality(&self) -> (f64, f64) {
        let e = self.rot.transpose() * self.rot - Matrix3::identity();
        (e.norm(), self.rot.determinant())
    }

    /// Angle of the relative rotation and distance between translations.
    /// The angle uses `atan2(sin θ, cos θ)`, accurate down to rounding near 0.
    pub fn distance_to(&self, other: &PoseSE3<f64>) -> (f64, f64) {
        let r = self.rot.transpose() * other.rot;
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
        let c = (r.trace() - 1.0) * 0.5;
        (s.atan2(c), (self.trans - other.trans).norm())
    }

    /// Inverse of [`exp_map`] for real poses.
    pub fn log(&self) -> Twist<f64> {
        let phi = Rotation3::from_matrix(&self.rot).scaled_axis();
        let theta_sq = phi.norm_squared();
        let hat = skew(&phi);
        // V⁻¹ = I − ½[φ] + (1/θ² − (1+cosθ)/(2θ sinθ)) [φ]²
        let c = if theta_sq < 1e-10 {
            1.0 / 12.0 + theta_sq / 720.0
        } else {
            let th = theta_sq.sqrt();
            1.0 / theta_sq - (1.0 + th.cos()) / (2.0 * th * th.sin())
        };
        let v_inv = Matrix3::identity() - hat * 0.5 + hat * hat * c;
        Twist { phi, rho: v_inv * self.trans }
    }
}

/// Skew-symmetric matrix `[v]` with `[v] w = v × w`.
#[rustfmt::skip]
pub fn skew<S: Scalar>(v: &Vector3<S>) -> Matrix3<S> {
    let z = S::zero();
    Matrix3::new(
        z,     -v[2],  v[1],
        v[2],   z,    -v[0],
        -v[1],  v[0],  z,
    )
}

/// Exponential map. `R = cosθ I + (1 − cosθ) a aᵀ + sinθ [a]` and
/// `t = (sinθ/θ I + (1 − sinθ/θ) a aᵀ + (1 − cosθ)/θ [a]) ρ`, written in terms
/// of `φ = θa` so the coefficients are smooth in `θ²`. Near zero the
/// coefficients come from their Taylor expansions, which keeps seeded
/// perturbations exact at `ξ = 0`.
pub fn exp_map<S: Scalar>(xi: &Twist<S>) -> PoseSE3<S> {
    let phi = &xi.phi;
    let theta_sq = phi.dot(phi);
    let (a, b, c) = if theta_sq.re() < SMALL_ANGLE_SQ {
        // sinθ/θ, (1 − cosθ)/θ², (θ − sinθ)/θ³
        (
            S::one() - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            S::from(0.5) - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            S::from(1.0 / 6.0) - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let a = theta.sin() / theta;
        let b = (S::one() - theta.cos()) / theta_sq;
        let c = (S::one() - a) / theta_sq;
        (a, b, c)
    };
    let hat = skew(phi);
    let outer = phi * phi.transpose();
    let id = Matrix3::<S>::identity();
    // R = I + A[φ] + B[φ]², with [φ]² = φφᵀ − θ²I
    let cos_theta = S::one() - b * theta_sq;
    let rot = id * cos_theta + outer * b + hat * a;
    let jac = id * a + outer * c + hat * b;
    PoseSE3 { rot, trans: jac * xi.rho }
}

/// Rotation angle `θ = arccos((tr R − 1)/2)` with the argument clamped to
/// `[−1, 1]` on its real part.
pub fn log_angle<S: Scalar>(pose: &PoseSE3<S>) -> S {
    let r = &pose.rot;
    let arg = (r[(0, 0)] + r[(1, 1)] + r[(2, 2)] - 1.0) * 0.5;
    let x = arg.re();
    if x >= 1.0 {
        arg.with_re(1.0).acos().with_re(0.0)
    } else if x <= -1.0 {
        arg.with_re(-1.0).acos().with_re(std::f64::consts::PI)
    } else {
        arg.acos()
    }
}
