//! Pose optimization over a left-multiplied twist increment, with gradients
//! from complex-step passes and Hessians from bicomplex passes.
//!
//! An objective is re-linearized ("prepared") once per outer iteration at the
//! current pose, then evaluated as a function of the increment `ξ`, with the
//! candidate pose `exp(ξ)·T`.

use nalgebra::{Matrix6, Vector6};

use crate::csfd::{BicomplexScalar, Channel, ComplexScalar, Scalar, StepSize};
use crate::se3::{PoseSE3, Twist};

/// Energy of a pose increment about the prepared pose.
pub trait PoseObjective {
    type Error;

    /// Freeze data that depends discretely on the pose (associations, active
    /// sets) at `pose`.
    fn prepare(&mut self, pose: &PoseSE3<f64>) -> Result<(), Self::Error>;

    /// Real energy at any increment; used for acceptance tests and line search.
    fn energy(&self, xi: &Twist<f64>) -> f64;

    /// Energy in a promoted scalar type; only evaluated for derivatives at
    /// small increments.
    fn energy_perturbed<S: Scalar>(&self, xi: &Twist<S>) -> S;
}

/// Gradient from six complex-step passes at `ξ = 0`.
pub fn gradient<O: PoseObjective>(obj: &O, h: StepSize) -> Vector6<f64> {
    let mut g = Vector6::zeros();
    for i in 0..6 {
        let e: ComplexScalar = obj.energy_perturbed(&Twist::zero().seed(i, h));
        g[i] = e.im / h.get();
    }
    g
}

/// Gradient and Hessian from the 21 bicomplex seedings of the upper triangle
/// at `ξ = 0`; the gradient is read from the first channel of the diagonal
/// passes.
pub fn gradient_hessian<O: PoseObjective>(obj: &O, h: StepSize) -> (Vector6<f64>, Matrix6<f64>) {
    let mut g = Vector6::zeros();
    let mut hess = Matrix6::zeros();
    let h2 = h.get() * h.get();
    for i in 0..6 {
        for j in i..6 {
            let e: BicomplexScalar = obj.energy_perturbed(&Twist::zero().seed_pair(i, j, h));
            hess[(i, j)] = e.im12 / h2;
            hess[(j, i)] = hess[(i, j)];
            if i == j {
                g[i] = e.im1 / h.get();
            }
        }
    }
    (g, hess)
}

/// All 36 seedings, without mirroring; for symmetry checks.
pub fn hessian_unmirrored<O: PoseObjective>(obj: &O, h: StepSize) -> Matrix6<f64> {
    let h2 = h.get() * h.get();
    Matrix6::from_fn(|i, j| obj.energy_perturbed::<BicomplexScalar>(&Twist::zero().seed_pair(i, j, h)).im12 / h2)
}

/// First and second derivative of `α ↦ E(α·d)` at `α = 0`.
pub fn directional_derivatives<O: PoseObjective>(obj: &O, d: &Vector6<f64>, h: StepSize) -> (f64, f64) {
    let alpha = BicomplexScalar::from(0.0).seeded(Channel::First, h).seeded(Channel::Second, h);
    let mut xi: Twist<BicomplexScalar> = Twist::zero();
    for i in 0..6 {
        xi.set(i, alpha * d[i]);
    }
    let e = obj.energy_perturbed(&xi);
    (e.im1 / h.get(), e.im12 / (h.get() * h.get()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Steepest descent with a curvature-initialized backtracking line search.
    Gd,
    /// Polak–Ribière+ conjugate gradient with periodic restart.
    Ncg,
    /// Levenberg-damped Newton steps.
    Newton,
    /// Gradient steps while the loss exceeds the threshold, Newton directions
    /// below it, both with the same line search.
    SwitchedNewton(Eta),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Ncg => "ncg",
            Method::Newton => "newton",
            Method::SwitchedNewton(_) => "newton",
        }
    }
}

/// Loss threshold of the switched method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eta {
    /// Fraction of the initial loss.
    Relative(f64),
    Absolute(f64),
}

impl Default for Eta {
    fn default() -> Self {
        Eta::Relative(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Stop when the accepted increment is shorter than this.
    pub tol: f64,
    pub h: StepSize,
    /// Armijo constant.
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub ncg_restart: usize,
    pub lambda0: f64,
    /// Consecutive loss increases that count as divergence.
    pub divergence_window: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tol: 1e-6,
            h: StepSize::default(),
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
            ncg_restart: 6,
            lambda0: 1e-6,
            divergence_window: 5,
        }
    }
}

/// One row of the per-iteration trace. Errors are against ground truth when
/// it is known: translation in meters, rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub trans_err: Option<f64>,
    pub rot_err: Option<f64>,
}

pub const TRACE_HEADER: &str = "iteration,loss,grad_norm,trans_err,rot_err";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "nan".into());
    for r in rows {
        s.push_str(&format!("{},{:e},{:e},{},{}\n", r.iteration, r.loss, r.grad_norm, opt(r.trans_err), opt(r.rot_err)));
    }
    s
}

/// Pose errors `(translation, rotation in degrees)` of `pose` against `truth`.
pub fn pose_errors(pose: &PoseSE3<f64>, truth: &PoseSE3<f64>) -> (f64, f64) {
    let (ang, dist) = truth.distance_to(pose);
    (dist, ang.to_degrees())
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub pose: PoseSE3<f64>,
    pub loss: f64,
    /// Row `k` is the state after `k` accepted steps.
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Outer iterations performed.
    pub iterations: usize,
    /// Stopped because the loss kept increasing.
    pub diverged: bool,
}

impl OptimResult {
    /// First iteration whose loss is at or below `target`.
    pub fn iterations_to(&self, target: f64) -> Option<usize> {
        self.trace.iter().find(|r| r.loss <= target).map(|r| r.iteration)
    }
}

/// Backtracking from `alpha0` until the Armijo condition holds. Returns the
/// accepted step and its energy, or `None` if no decrease was found.
pub fn backtrack<O: PoseObjective>(
    obj: &O,
    d: &Vector6<f64>,
    e0: f64,
    slope: f64,
    alpha0: f64,
    cfg: &OptimConfig,
) -> Option<(f64, f64)> {
    let mut alpha = alpha0;
    for _ in 0..=cfg.max_backtracks {
        let e = obj.energy(&Twist::from_vector(&(d * alpha)));
        if e.is_finite() && e <= e0 + cfg.c1 * alpha * slope {
            return Some((alpha, e));
        }
        alpha *= cfg.shrink;
    }
    None
}

/// Line search whose first trial is the minimizer of the local quadratic
/// model along `d` (exact for quadratic energies).
fn curvature_line_search<O: PoseObjective>(obj: &O, d: &Vector6<f64>, e0: f64, cfg: &OptimConfig) -> Option<(f64, f64)> {
    let (slope, curv) = directional_derivatives(obj, d, cfg.h);
    if slope >= 0.0 {
        return None;
    }
    let alpha0 = if curv > 0.0 { -slope / curv } else { 1.0 };
    backtrack(obj, d, e0, slope, alpha0, cfg)
}

/// Solve `(H + λI) d = −g` with increasing `λ` until the Cholesky
/// factorization succeeds; returns the direction and the `λ` used.
fn damped_newton(hess: &Matrix6<f64>, g: &Vector6<f64>, mut lambda: f64) -> Option<(Vector6<f64>, f64)> {
    for _ in 0..20 {
        if let Some(ch) = (hess + Matrix6::identity() * lambda).cholesky() {
            return Some((ch.solve(&-g), lambda));
        }
        lambda = (lambda * 10.0).max(1e-12);
    }
    None
}

fn eta_threshold(eta: Eta, initial_loss: f64) -> f64 {
    match eta {
        Eta::Relative(f) => f * initial_loss,
        Eta::Absolute(v) => v,
    }
}

/// Run `method` from `init`.
pub fn optimize<O: PoseObjective>(
    obj: &mut O,
    init: PoseSE3<f64>,
    method: Method,
    cfg: &OptimConfig,
    truth: Option<&PoseSE3<f64>>,
) -> Result<OptimResult, O::Error> {
    let mut pose = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut lambda = cfg.lambda0;
    let mut prev_g: Option<Vector6<f64>> = None;
    let mut prev_d: Option<Vector6<f64>> = None;
    let mut since_restart = 0usize;
    let mut increases = 0usize;
    let mut initial_loss = None;
    let mut iterations = 0;
    let mut stalled = false;
    loop {
        obj.prepare(&pose)?;
        let e0 = obj.energy(&Twist::zero());
        let e_init = *initial_loss.get_or_insert(e0);
        // the switched method computes the gradient exactly as gradient
        // descent does while above the threshold, so its steps match bit for bit
        let want_hessian = match method {
            Method::Newton => true,
            Method::SwitchedNewton(eta) => e0 <= eta_threshold(eta, e_init),
            _ => false,
        };
        let (g, hess) = if want_hessian {
            let (g, h) = gradient_hessian(obj, cfg.h);
            (g, Some(h))
        } else {
            (gradient(obj, cfg.h), None)
        };
        let (trans_err, rot_err) = match truth {
            Some(t) => {
                let (a, b) = pose_errors(&pose, t);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        if let Some(last) = trace.last().map(|r: &TraceRow| r.loss) {
            increases = if e0 > last { increases + 1 } else { 0 };
        }
        trace.push(TraceRow { iteration: iterations, loss: e0, grad_norm: g.norm(), trans_err, rot_err });
        if converged || stalled || iterations >= cfg.max_iters || increases >= cfg.divergence_window {
            break;
        }
        if g.norm() == 0.0 {
            converged = true;
            continue;
        }
        let step: Option<(Vector6<f64>, f64)> = match method {
            Method::Gd => {
                let d = -g;
                curvature_line_search(obj, &d, e0, cfg).map(|(a, _)| (d * a, a))
            }
            Method::Ncg => {
                let mut beta = 0.0;
                if let (Some(pg), Some(_)) = (prev_g, prev_d) {
                    if since_restart < cfg.ncg_restart {
                        beta = (g.dot(&(g - pg)) / pg.dot(&pg)).max(0.0);
                    }
                }
                if beta == 0.0 {
                    since_restart = 0;
                }
                let mut d = -g + prev_d.unwrap_or_else(Vector6::zeros) * beta;
                if d.dot(&g) >= 0.0 {
                    d = -g;
                    since_restart = 0;
                }
                since_restart += 1;
                prev_g = Some(g);
                let s = curvature_line_search(obj, &d, e0, cfg);
                prev_d = Some(d);
                s.map(|(a, _)| (d * a, a))
            }
            Method::Newton => {
                let hess = hess.unwrap();
                let mut accepted = None;
                for _ in 0..8 {
                    let Some((d, used)) = damped_newton(&hess, &g, lambda) else { break };
                    lambda = used;
                    let e = obj.energy(&Twist::from_vector(&d));
                    if d.dot(&g) < 0.0 && e.is_finite() && e < e0 {
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = Some((d, 1.0));
                        break;
                    }
                    lambda *= 10.0;
                }
                accepted.or_else(|| {
                    let d = -g;
                    curvature_line_search(obj, &d, e0, cfg).map(|(a, _)| (d * a, a))
                })
            }
            Method::SwitchedNewton(_) => {
                let gd_step = |obj: &O| {
                    let d = -g;
                    curvature_line_search(obj, &d, e0, cfg).map(|(a, _)| (d * a, a))
                };
                match hess {
                    None => gd_step(obj),
                    Some(hess) => match damped_newton(&hess, &g, 0.0) {
                        Some((d, _)) if d.dot(&g) < 0.0 => {
                            backtrack(obj, &d, e0, d.dot(&g), 1.0, cfg).map(|(a, _)| (d * a, a)).or_else(|| gd_step(obj))
                        }
                        _ => gd_step(obj),
                    },
                }
            }
        };
        iterations += 1;
        match step {
            Some((dx, _)) => {
                pose = PoseSE3::identity().perturbed(&Twist::from_vector(&dx)).compose(&pose);
                if dx.norm() < cfg.tol {
                    converged = true;
                }
            }
            None => {
                // no descent possible along any direction tried
                stalled = true;
                converged = g.norm() <= 1e-9 * (1.0 + e0.abs());
            }
        }
    }
    let loss = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let diverged = increases >= cfg.divergence_window;
    Ok(OptimResult { pose, loss, trace, converged, iterations, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    /// Point-to-point energy with known pairs: `Σ ‖exp(ξ)·T·a − b‖²`.
    struct Pairs {
        pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
        moved: Vec<Vector3<f64>>,
    }

    impl PoseObjective for Pairs {
        type Error = ();
        fn prepare(&mut self, pose: &PoseSE3<f64>) -> Result<(), ()> {
            self.moved = self.pairs.iter().map(|(a, _)| pose.transform(a)).collect();
            Ok(())
        }
        fn energy(&self, xi: &Twist<f64>) -> f64 {
            self.energy_perturbed(xi)
        }
        fn energy_perturbed<S: Scalar>(&self, xi: &Twist<S>) -> S {
            let t = crate::se3::exp_map(xi);
            let mut e = S::zero();
            for (p, (_, b)) in self.moved.iter().zip(&self.pairs) {
                let d = t.transform(&p.map(S::from)) - b.map(S::from);
                e += d.dot(&d);
            }
            e
        }
    }

    fn problem() -> (Pairs, PoseSE3<f64>) {
        let truth = PoseSE3::identity().perturbed(&Twist::new(Vector3::new(0.1, -0.05, 0.08), Vector3::new(0.05, 0.02, -0.03)));
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|i| {
                let a = i as f64;
                Vector3::new((a * 0.7).sin(), (a * 1.3).cos(), 1.0 + 0.3 * (a * 0.4).sin())
            })
            .collect();
        let pairs = pts.iter().map(|p| (*p, truth.transform(p))).collect();
        (Pairs { pairs, moved: vec![] }, truth)
    }

    #[test]
    fn all_methods_reach_ground_truth() {
        for method in [Method::Gd, Method::Ncg, Method::Newton, Method::SwitchedNewton(Eta::default())] {
            let (mut obj, truth) = problem();
            let cfg = OptimConfig { max_iters: 500, ..OptimConfig::default() };
            let res = optimize(&mut obj, PoseSE3::identity(), method, &cfg, Some(&truth)).unwrap();
            let (dt, dr) = pose_errors(&res.pose, &truth);
            assert!(dt < 1e-5 && dr < 1e-3, "{method:?}: {dt} {dr} after {}", res.iterations);
            for w in res.trace.windows(2) {
                assert!(w[1].loss <= w[0].loss + 1e-12, "{method:?} loss went up");
            }
        }
    }

    #[test]
    fn newton_is_fastest() {
        let count = |m| {
            let (mut obj, truth) = problem();
            let cfg = OptimConfig { max_iters: 500, ..OptimConfig::default() };
            optimize(&mut obj, PoseSE3::identity(), m, &cfg, Some(&truth)).unwrap().iterations_to(1e-10).unwrap_or(usize::MAX)
        };
        let (gd, ncg, newton) = (count(Method::Gd), count(Method::Ncg), count(Method::Newton));
        assert!(newton < ncg && ncg <= gd, "gd {gd} ncg {ncg} newton {newton}");
    }

    #[test]
    fn start_at_optimum() {
        let (mut obj, truth) = problem();
        let res = optimize(&mut obj, truth, Method::Newton, &OptimConfig::default(), Some(&truth)).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 1);
        assert!(res.loss < 1e-20);
        let (mut obj, truth) = problem();
        let res = optimize(&mut obj, truth, Method::Gd, &OptimConfig::default(), None).unwrap();
        assert!(res.converged && res.iterations == 0);
        assert_eq!(res.pose, truth);
    }

    #[test]
    fn hessian_symmetry_and_directional_consistency() {
        let (mut obj, _) = problem();
        obj.prepare(&PoseSE3::identity()).unwrap();
        let h = StepSize::default();
        let full = hessian_unmirrored(&obj, h);
        assert!((full - full.transpose()).abs().max() <= 1e-10 * full.abs().max());
        let (g, hess) = gradient_hessian(&obj, h);
        assert!((g - gradient(&obj, h)).norm() <= 1e-12 * g.norm());
        let d = Vector6::new(0.3, -0.1, 0.2, 1.0, 0.5, -0.4);
        let (slope, curv) = directional_derivatives(&obj, &d, h);
        assert!((slope - g.dot(&d)).abs() <= 1e-10 * slope.abs());
        assert!((curv - d.dot(&(hess * d))).abs() <= 1e-9 * curv.abs());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [TraceRow { iteration: 0, loss: 1.5, grad_norm: 2.0, trans_err: None, rot_err: Some(0.5) }];
        let csv = trace_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines[1], "0,1.5e0,2e0,nan,5e-1");
    }
}
