//! Projective point-to-plane ICP with a linearized least-squares baseline and
//! first- and second-order optimizers driven by complex-step derivatives.

use std::str::FromStr;

use nalgebra::{Matrix6, Rotation3, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::csfd::{Scalar, StepSize};
use crate::frames::{GeometryMaps, Intrinsics, Pyramid};
use crate::optim::{self, Method, OptimConfig, OptimResult, PoseObjective, TraceRow};
use crate::se3::{exp_map, PoseSE3, Twist};
use crate::tsdf::SurfacePrediction;
use crate::util::pairwise_sum;

/// Fewest correspondences that constrain all six degrees of freedom.
pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("only {0} correspondences survived association")]
    Degenerate(usize),
    #[error("normal equations are ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("invalid ICP configuration: {0}")]
    InvalidConfig(String),
}

/// A source point paired with a target surface sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpCorrespondence {
    /// Source pixel.
    pub pixel: (usize, usize),
    /// Continuous target pixel the source point projected to.
    pub target_uv: (f64, f64),
    /// Source vertex in source camera coordinates.
    pub source: Vector3<f64>,
    pub target_vertex: Vector3<f64>,
    pub target_normal: Vector3<f64>,
}

impl IcpCorrespondence {
    /// Signed point-to-plane distance with the source placed by `pose`.
    pub fn residual(&self, pose: &PoseSE3<f64>) -> f64 {
        (pose.transform(&self.source) - self.target_vertex).dot(&self.target_normal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Largest point distance, meters.
    pub max_distance: f64,
    /// Largest angle between normals, degrees.
    pub max_normal_angle: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { max_distance: 0.1, max_normal_angle: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpOptimizer {
    Linearized,
    Gd,
    Ncg,
    Newton,
}

impl IcpOptimizer {
    pub const ALL: [IcpOptimizer; 4] = [IcpOptimizer::Linearized, IcpOptimizer::Gd, IcpOptimizer::Ncg, IcpOptimizer::Newton];

    pub fn name(self) -> &'static str {
        match self {
            IcpOptimizer::Linearized => "linearized",
            IcpOptimizer::Gd => "gd",
            IcpOptimizer::Ncg => "ncg",
            IcpOptimizer::Newton => "newton",
        }
    }
}

impl FromStr for IcpOptimizer {
    type Err = IcpError;
    fn from_str(s: &str) -> Result<Self, IcpError> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s.to_ascii_lowercase())
            .ok_or_else(|| IcpError::InvalidConfig(format!("unknown optimizer '{s}'")))
    }
}

impl std::fmt::Display for IcpOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Largest iteration count accepted for a single pyramid level.
pub const MAX_LEVEL_ITERS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    /// Outer iterations per pyramid level, coarsest first.
    pub level_iters: Vec<usize>,
    pub optimizer: IcpOptimizer,
    pub thresholds: Thresholds,
    /// Line search, step size, damping and stopping tolerance.
    pub optim: OptimConfig,
    /// Normal equations with a larger condition number are rejected.
    pub max_condition: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            level_iters: vec![10, 5, 4],
            optimizer: IcpOptimizer::Newton,
            thresholds: Thresholds::default(),
            optim: OptimConfig::default(),
            max_condition: 1e12,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        if self.level_iters.is_empty() {
            return Err(IcpError::InvalidConfig("no pyramid levels".into()));
        }
        if let Some(n) = self.level_iters.iter().find(|&&n| n > MAX_LEVEL_ITERS) {
            return Err(IcpError::InvalidConfig(format!("{n} iterations per level exceeds {MAX_LEVEL_ITERS}")));
        }
        let t = &self.thresholds;
        if !(t.max_distance > 0.0) || !(t.max_normal_angle > 0.0 && t.max_normal_angle <= 180.0) {
            return Err(IcpError::InvalidConfig("rejection thresholds must be positive".into()));
        }
        if !(self.optim.tol >= 0.0) {
            return Err(IcpError::InvalidConfig("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

pub type IcpResult = OptimResult;

/// Projective association of every valid source pixel placed by `pose` with
/// the prediction rendered from `target_pose` through `k`. Pairs farther than
/// the distance threshold, or whose normals differ by more than the angle
/// threshold (orientation-agnostic), are rejected.
pub fn associate(
    pose: &PoseSE3<f64>,
    source: &GeometryMaps<f64>,
    target: &SurfacePrediction<f64>,
    target_pose: &PoseSE3<f64>,
    k: &Intrinsics,
    thresholds: &Thresholds,
) -> Result<Vec<IcpCorrespondence>, IcpError> {
    let to_target = target_pose.inverse().compose(pose);
    let cos_max = thresholds.max_normal_angle.to_radians().cos();
    let corr: Vec<IcpCorrespondence> = (0..source.width * source.height)
        .into_par_iter()
        .filter_map(|i| {
            if !source.valid[i] {
                return None;
            }
            let v = source.vertices[i];
            let (u, w) = k.project(&to_target.transform(&v))?;
            let (tv, tn) = target.sample(u, w)?;
            let p = pose.transform(&v);
            if (p - tv).norm() > thresholds.max_distance {
                return None;
            }
            let ns = pose.rotate(&source.normals[i]);
            if ns.dot(&tn).abs() < cos_max {
                return None;
            }
            Some(IcpCorrespondence {
                pixel: (i % source.width, i / source.width),
                target_uv: (u, w),
                source: v,
                target_vertex: tv,
                target_normal: tn,
            })
        })
        .collect();
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(IcpError::Degenerate(corr.len()));
    }
    Ok(corr)
}

/// Sum of squared point-to-plane distances with the source points moved by
/// `exp(ξ)`. Reduction is pairwise in correspondence order.
pub fn icp_energy<S: Scalar>(xi: &Twist<S>, corr: &[IcpCorrespondence]) -> S {
    let t = exp_map(xi);
    let terms: Vec<S> = corr
        .par_iter()
        .map(|c| {
            let p = t.transform(&c.source.map(S::from));
            let r = (p - c.target_vertex.map(S::from)).dot(&c.target_normal.map(S::from));
            r * r
        })
        .collect();
    pairwise_sum(&terms)
}

/// Jacobian row of the residual with respect to a small rotation
/// `(α, β, γ)` and translation applied to the already-placed source point.
fn linear_row(c: &IcpCorrespondence) -> (Vector6<f64>, f64) {
    let n = c.target_normal;
    let p = c.source;
    let a = p.cross(&n);
    (Vector6::new(a.x, a.y, a.z, n.x, n.y, n.z), (p - c.target_vertex).dot(&n))
}

/// Exact gradient of [`icp_energy`] at `ξ = 0`.
pub fn energy_gradient_at_zero(corr: &[IcpCorrespondence]) -> Vector6<f64> {
    corr.iter().map(|c| {
        let (j, r) = linear_row(c);
        j * (2.0 * r)
    })
    .fold(Vector6::zeros(), |a, b| a + b)
}

/// Small-angle least-squares step: `x = (α, β, γ, tx, ty, tz)` solving the
/// 6×6 normal equations of the residuals linearized with `cos θ ≈ 1`,
/// `sin θ ≈ θ`.
pub fn solve_linearized(corr: &[IcpCorrespondence], max_condition: f64) -> Result<Twist, IcpError> {
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(IcpError::Degenerate(corr.len()));
    }
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for c in corr {
        let (j, r) = linear_row(c);
        a += j * j.transpose();
        b -= j * r;
    }
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= max_condition) {
        return Err(IcpError::IllConditioned(cond));
    }
    let x = a.cholesky().map(|ch| ch.solve(&b)).ok_or(IcpError::IllConditioned(cond))?;
    Ok(Twist::from_vector(&x))
}

/// Rigid increment built from a linearized solution: the three angles are
/// applied as exact Euler rotations `R_z(γ)·R_y(β)·R_x(α)`.
pub fn linearized_increment(x: &Twist) -> PoseSE3<f64> {
    let r = Rotation3::from_euler_angles(x.phi.x, x.phi.y, x.phi.z);
    PoseSE3::new(*r.matrix(), x.rho)
}

/// Where correspondences come from at each outer iteration.
pub enum Association<'a> {
    /// A fixed set, independent of the pose.
    Fixed(&'a [IcpCorrespondence]),
    Projective {
        source: &'a GeometryMaps<f64>,
        target: &'a SurfacePrediction<f64>,
        target_pose: PoseSE3<f64>,
        k: &'a Intrinsics,
        thresholds: Thresholds,
    },
}

/// The ICP energy as a pose objective: each `prepare` associates at the
/// current pose and stores the correspondences with sources already placed.
pub struct IcpObjective<'a> {
    pub association: Association<'a>,
    /// Correspondences of the current outer iteration, sources in the global
    /// frame.
    pub placed: Vec<IcpCorrespondence>,
}

impl<'a> IcpObjective<'a> {
    pub fn new(association: Association<'a>) -> Self {
        Self { association, placed: Vec::new() }
    }
}

impl PoseObjective for IcpObjective<'_> {
    type Error = IcpError;

    fn prepare(&mut self, pose: &PoseSE3<f64>) -> Result<(), IcpError> {
        let corr = match &self.association {
            Association::Fixed(c) => {
                if c.len() < MIN_CORRESPONDENCES {
                    return Err(IcpError::Degenerate(c.len()));
                }
                c.to_vec()
            }
            Association::Projective { source, target, target_pose, k, thresholds } => {
                associate(pose, source, target, target_pose, k, thresholds)?
            }
        };
        self.placed = corr.into_iter().map(|c| IcpCorrespondence { source: pose.transform(&c.source), ..c }).collect();
        Ok(())
    }

    fn energy(&self, xi: &Twist<f64>) -> f64 {
        icp_energy(xi, &self.placed)
    }

    fn energy_perturbed<S: Scalar>(&self, xi: &Twist<S>) -> S {
        icp_energy(xi, &self.placed)
    }
}

/// Iterate linearized steps, accepting each without a line search.
fn run_linearized(
    obj: &mut IcpObjective<'_>,
    init: PoseSE3<f64>,
    max_iters: usize,
    cfg: &IcpConfig,
    truth: Option<&PoseSE3<f64>>,
) -> Result<IcpResult, IcpError> {
    let mut pose = init;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut converged = false;
    let mut increases = 0;
    let mut iterations = 0;
    loop {
        obj.prepare(&pose)?;
        let loss = obj.energy(&Twist::zero());
        let g = energy_gradient_at_zero(&obj.placed);
        if let Some(last) = trace.last() {
            increases = if loss > last.loss { increases + 1 } else { 0 };
        }
        let errs = truth.map(|t| optim::pose_errors(&pose, t));
        trace.push(TraceRow {
            iteration: iterations,
            loss,
            grad_norm: g.norm(),
            trans_err: errs.map(|e| e.0),
            rot_err: errs.map(|e| e.1),
        });
        if converged || iterations >= max_iters || increases >= cfg.optim.divergence_window {
            break;
        }
        let x = solve_linearized(&obj.placed, cfg.max_condition)?;
        pose = linearized_increment(&x).compose(&pose);
        iterations += 1;
        if x.norm() < cfg.optim.tol {
            converged = true;
        }
    }
    let diverged = increases >= cfg.optim.divergence_window;
    Ok(OptimResult { pose, loss: trace.last().map(|r| r.loss).unwrap_or(f64::NAN), trace, converged, iterations, diverged })
}

/// Minimize from `init` with the configured optimizer, re-associating at each
/// outer iteration.
pub fn solve(
    association: Association<'_>,
    init: PoseSE3<f64>,
    max_iters: usize,
    cfg: &IcpConfig,
    truth: Option<&PoseSE3<f64>>,
) -> Result<IcpResult, IcpError> {
    let mut obj = IcpObjective::new(association);
    let oc = OptimConfig { max_iters, ..cfg.optim };
    match cfg.optimizer {
        IcpOptimizer::Linearized => run_linearized(&mut obj, init, max_iters, cfg, truth),
        IcpOptimizer::Gd => optim::optimize(&mut obj, init, Method::Gd, &oc, truth),
        IcpOptimizer::Ncg => optim::optimize(&mut obj, init, Method::Ncg, &oc, truth),
        IcpOptimizer::Newton => optim::optimize(&mut obj, init, Method::Newton, &oc, truth),
    }
}

/// Newton iterations over fixed correspondences from the pose `exp(ξ₀)`.
pub fn solve_newton(corr: &[IcpCorrespondence], xi0: &Twist, max_iters: usize, cfg: &IcpConfig, truth: Option<&PoseSE3<f64>>) -> Result<IcpResult, IcpError> {
    let cfg = IcpConfig { optimizer: IcpOptimizer::Newton, ..cfg.clone() };
    solve(Association::Fixed(corr), exp_map(xi0), max_iters, &cfg, truth)
}

/// Gradient descent or nonlinear conjugate gradient over fixed
/// correspondences from the pose `exp(ξ₀)`.
pub fn solve_first_order(
    corr: &[IcpCorrespondence],
    xi0: &Twist,
    max_iters: usize,
    cfg: &IcpConfig,
    method: IcpOptimizer,
    truth: Option<&PoseSE3<f64>>,
) -> Result<IcpResult, IcpError> {
    if !matches!(method, IcpOptimizer::Gd | IcpOptimizer::Ncg) {
        return Err(IcpError::InvalidConfig(format!("{method} is not a first-order method")));
    }
    let cfg = IcpConfig { optimizer: method, ..cfg.clone() };
    solve(Association::Fixed(corr), exp_map(xi0), max_iters, &cfg, truth)
}

/// Coarse-to-fine registration of a frame pyramid against a prediction
/// rendered at `target_pose` through `k`, starting from `init`. The trace
/// concatenates the levels.
pub fn track_frame(
    target: &SurfacePrediction<f64>,
    target_pose: &PoseSE3<f64>,
    k: &Intrinsics,
    frame: &Pyramid<f64>,
    init: &PoseSE3<f64>,
    cfg: &IcpConfig,
    truth: Option<&PoseSE3<f64>>,
) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    let mut pose = *init;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut diverged = false;
    let mut loss = f64::NAN;
    let n = cfg.level_iters.len().min(frame.levels.len());
    for (li, &iters) in cfg.level_iters.iter().enumerate().take(n) {
        let level = &frame.levels[n - 1 - li];
        let assoc = Association::Projective { source: &level.maps, target, target_pose: *target_pose, k, thresholds: cfg.thresholds };
        let res = solve(assoc, pose, iters, cfg, truth)?;
        for mut row in res.trace {
            row.iteration += iterations;
            trace.push(row);
        }
        iterations += res.iterations;
        pose = res.pose;
        loss = res.loss;
        // a level that merely runs out of iterations still hands on its pose;
        // only divergence marks the frame
        diverged |= res.diverged;
    }
    Ok(OptimResult { pose, loss, trace, converged: !diverged, iterations, diverged })
}

/// Known correspondences for a depth-projected cloud: every `stride`-th valid
/// pixel of `maps` paired with itself moved by `truth`.
pub fn cloud_correspondences(maps: &GeometryMaps<f64>, truth: &PoseSE3<f64>, stride: usize) -> Vec<IcpCorrespondence> {
    (0..maps.width * maps.height)
        .step_by(stride.max(1))
        .filter(|&i| maps.valid[i])
        .map(|i| {
            let (x, y) = (i % maps.width, i / maps.width);
            IcpCorrespondence {
                pixel: (x, y),
                target_uv: (x as f64, y as f64),
                source: maps.vertices[i],
                target_vertex: truth.transform(&maps.vertices[i]),
                target_normal: truth.rotate(&maps.normals[i]),
            }
        })
        .collect()
}

/// Central-difference step used by tests and diagnostics on the energy.
pub fn fd_gradient(corr: &[IcpCorrespondence], xi: &Twist, eps: f64) -> Vector6<f64> {
    let base = xi.to_vector();
    Vector6::from_fn(|i, _| {
        let mut p = base;
        let mut m = base;
        p[i] += eps;
        m[i] -= eps;
        (icp_energy(&Twist::from_vector(&p), corr) - icp_energy(&Twist::from_vector(&m), corr)) / (2.0 * eps)
    })
}

/// Complex-step gradient of the energy at an arbitrary `ξ`.
pub fn csfd_gradient(corr: &[IcpCorrespondence], xi: &Twist, h: StepSize) -> Vector6<f64> {
    Vector6::from_fn(|i, _| icp_energy(&xi.seed(i, h), corr).im / h.get())
}

/// Bicomplex Hessian of the energy at an arbitrary `ξ`, all 36 seedings.
pub fn csfd_hessian(corr: &[IcpCorrespondence], xi: &Twist, h: StepSize) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| icp_energy(&xi.seed_pair(i, j, h), corr).im12 / (h.get() * h.get()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{build_pyramid, surface_measure, DepthFrame, PyramidParams};
    use crate::synth::{render_depth, Scene, TraceParams};
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn plane_corr(n: usize, offset: f64) -> Vec<IcpCorrespondence> {
        // points on z = 1 against the same plane shifted by `offset`
        (0..n)
            .map(|i| {
                let (x, y) = ((i % 7) as f64 * 0.1 - 0.3, (i / 7) as f64 * 0.1 - 0.3);
                IcpCorrespondence {
                    pixel: (i, 0),
                    target_uv: (i as f64, 0.0),
                    source: Vector3::new(x, y, 1.0),
                    target_vertex: Vector3::new(x, y, 1.0 + offset),
                    target_normal: Vector3::z(),
                }
            })
            .collect()
    }

    /// Points on a curved surface with analytic normals, paired with their
    /// images under `truth`.
    fn cloud(truth: &PoseSE3<f64>) -> Vec<IcpCorrespondence> {
        let mut out = Vec::new();
        for iy in 0..12 {
            for ix in 0..12 {
                let (x, y) = (ix as f64 * 0.08 - 0.44, iy as f64 * 0.08 - 0.44);
                let z = 1.5 + 0.3 * (3.0 * x).sin() * (2.0 * y).cos();
                let dzdx = 0.9 * (3.0 * x).cos() * (2.0 * y).cos();
                let dzdy = -0.6 * (3.0 * x).sin() * (2.0 * y).sin();
                let p = Vector3::new(x, y, z);
                let n = Vector3::new(-dzdx, -dzdy, 1.0).normalize();
                out.push(IcpCorrespondence {
                    pixel: (ix, iy),
                    target_uv: (ix as f64, iy as f64),
                    source: p,
                    target_vertex: truth.transform(&p),
                    target_normal: truth.rotate(&n),
                });
            }
        }
        out
    }

    #[test]
    fn energy_examples() {
        let corr = plane_corr(1, 0.0);
        assert_eq!(icp_energy(&Twist::<f64>::zero(), &corr), 0.0);
        let t = 0.37;
        let e = icp_energy(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, t)), &corr);
        assert!((e - t * t).abs() < 1e-15);
    }

    #[test]
    fn csfd_gradient_matches_fd() {
        let truth = exp_map(&Twist::new(Vector3::new(0.05, -0.1, 0.08), Vector3::new(0.05, 0.02, -0.07)));
        let corr = cloud(&truth);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let xi = Twist::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)));
            let g = csfd_gradient(&corr, &xi, StepSize::default());
            let fd = fd_gradient(&corr, &xi, 1e-6);
            assert!((g - fd).norm() <= 1e-5 * g.norm(), "{g} vs {fd}");
            let hess = csfd_hessian(&corr, &xi, StepSize::default());
            assert!((hess - hess.transpose()).abs().max() <= 1e-10 * hess.abs().max());
        }
    }

    /// Patches of the three planes `x = 0.5`, `y = −0.4`, `z = 1.2`, paired
    /// with the same points moved by `shift`.
    fn corner(shift: Vector3<f64>) -> Vec<IcpCorrespondence> {
        let mut out = Vec::new();
        for a in 0..6 {
            for b in 0..6 {
                let (s, t) = (a as f64 * 0.05, b as f64 * 0.05);
                for (p, n) in [
                    (Vector3::new(0.5, s - 0.3, 1.0 + t), Vector3::x()),
                    (Vector3::new(s, -0.4, 1.0 + t), Vector3::y()),
                    (Vector3::new(s, t - 0.3, 1.2), Vector3::z()),
                ] {
                    out.push(IcpCorrespondence {
                        pixel: (a, b),
                        target_uv: (a as f64, b as f64),
                        source: p,
                        target_vertex: p + shift,
                        target_normal: n,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn linearized_examples() {
        // a single plane leaves three degrees of freedom unconstrained
        assert!(matches!(solve_linearized(&plane_corr(49, 0.0), 1e12), Err(IcpError::IllConditioned(_))));
        assert!(matches!(solve_linearized(&plane_corr(3, 0.0), 1e12), Err(IcpError::Degenerate(3))));
        assert!(solve_linearized(&cloud(&PoseSE3::identity()), 1e12).unwrap().norm() < 1e-12);
        assert!(solve_linearized(&corner(Vector3::zeros()), 1e12).unwrap().norm() < 1e-12);
        // least-squares oracle: a rigid 1 mm offset along the z-plane normal is
        // reproduced exactly by residuals that are linear in translation
        let x = solve_linearized(&corner(Vector3::new(0.0, 0.0, 1e-3)), 1e12).unwrap();
        assert!((x.rho.z - 1e-3).abs() < 1e-6, "{x:?}");
        assert!(x.rho.xy().norm() < 1e-9 && x.phi.norm() < 1e-9);
    }

    #[test]
    fn linearized_step_misses_large_rotation() {
        let truth = exp_map(&Twist::new(Vector3::new(0.0, 30f64.to_radians(), 0.0), Vector3::zeros()));
        let corr = cloud(&truth);
        let x = solve_linearized(&corr, 1e12).unwrap();
        let (ang, _) = linearized_increment(&x).distance_to(&truth);
        assert!(ang.to_degrees() > 5.0, "{}", ang.to_degrees());
    }

    #[test]
    fn infinitesimal_displacement_consistency() {
        let truth = exp_map(&Twist::new(Vector3::new(1e-7, -2e-7, 1e-7), Vector3::new(1e-7, 3e-7, -1e-7)));
        let corr = cloud(&truth);
        let x = solve_linearized(&corr, 1e12).unwrap();
        let placed: Vec<_> = corr.iter().map(|c| IcpCorrespondence { source: linearized_increment(&x).transform(&c.source), ..*c }).collect();
        assert!(energy_gradient_at_zero(&placed).norm() <= 1e-6);
    }

    #[test]
    fn solvers_on_fixed_cloud() {
        let pose = crate::synth::look_at(&Vector3::new(0.0, -0.4, 0.0), &Vector3::new(0.0, 0.15, 1.3));
        let (frame, k) = desk_maps(&pose);
        let maps: GeometryMaps<f64> = surface_measure(&frame, &k);
        let truth = exp_map(&Twist::new(Vector3::new(0.1, -0.08, 0.12), Vector3::new(0.05, -0.08, 0.06)));
        let corr = cloud_correspondences(&maps, &truth, 7);
        let cfg = IcpConfig::default();
        let newton = solve_newton(&corr, &Twist::zero(), 30, &cfg, Some(&truth)).unwrap();
        assert!(newton.converged);
        assert!(newton.loss < 1e-20, "{}", newton.loss);
        for w in newton.trace.windows(2).skip(1) {
            assert!(w[1].trans_err.unwrap() <= w[0].trans_err.unwrap() + 1e-8, "{:#?}", newton.trace);
            assert!(w[1].rot_err.unwrap() <= w[0].rot_err.unwrap() + 1e-8, "{:#?}", newton.trace);
        }
        let at_truth = solve_newton(&corr, &truth.log(), 30, &cfg, Some(&truth)).unwrap();
        assert!(at_truth.converged && at_truth.iterations <= 1 && at_truth.loss < 1e-20);
        let gd = solve_first_order(&corr, &Twist::zero(), 30, &cfg, IcpOptimizer::Gd, Some(&truth)).unwrap();
        let ncg = solve_first_order(&corr, &Twist::zero(), 30, &cfg, IcpOptimizer::Ncg, Some(&truth)).unwrap();
        for r in [&gd, &ncg, &newton] {
            for w in r.trace.windows(2) {
                assert!(w[1].loss <= w[0].loss + 1e-12);
            }
        }
        let it = |r: &IcpResult| r.iterations_to(1e-6).unwrap_or(usize::MAX);
        assert!(it(&newton) < it(&ncg) && it(&ncg) <= it(&gd), "{} {} {}", it(&newton), it(&ncg), it(&gd));
        assert!(solve_first_order(&corr, &Twist::zero(), 30, &cfg, IcpOptimizer::Newton, None).is_err());
    }

    #[test]
    fn gd_exact_line_search_one_step_on_quadratic() {
        // on the optical axis the rotation gradient vanishes, so the search
        // direction is a pure translation and the energy along it is quadratic
        let c = IcpCorrespondence {
            pixel: (0, 0),
            target_uv: (0.0, 0.0),
            source: Vector3::new(0.0, 0.0, 1.0),
            target_vertex: Vector3::new(0.0, 0.0, 1.25),
            target_normal: Vector3::z(),
        };
        let cfg = IcpConfig::default();
        let r = solve_first_order(&[c; 6], &Twist::zero(), 30, &cfg, IcpOptimizer::Gd, None).unwrap();
        assert!(r.trace[1].loss < 1e-20, "{:?}", r.trace);
        assert!(r.converged);
        // zero gradient at the start
        let corr0 = plane_corr(10, 0.0);
        let r = solve_first_order(&corr0, &Twist::zero(), 30, &cfg, IcpOptimizer::Gd, None).unwrap();
        assert!(r.converged && r.iterations == 0 && r.pose == PoseSE3::identity());
    }

    fn desk_maps(pose: &PoseSE3<f64>) -> (DepthFrame, Intrinsics) {
        let k = Intrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap();
        let depth = render_depth(&Scene::desk(), pose, &k, &TraceParams::default());
        (DepthFrame::new(160, 120, depth, 0.0).unwrap(), k)
    }

    /// Target maps are the frame's own geometry moved to global coordinates.
    fn as_prediction(maps: &GeometryMaps<f64>, pose: &PoseSE3<f64>) -> SurfacePrediction<f64> {
        GeometryMaps {
            vertices: maps.vertices.iter().map(|v| pose.transform(v)).collect(),
            normals: maps.normals.iter().map(|n| pose.rotate(n)).collect(),
            ..maps.clone()
        }
    }

    #[test]
    fn association_examples() {
        let pose = crate::synth::look_at(&Vector3::new(0.0, -0.4, 0.0), &Vector3::new(0.0, 0.15, 1.3));
        let (frame, k) = desk_maps(&pose);
        let maps: GeometryMaps<f64> = surface_measure(&frame, &k);
        let target = as_prediction(&maps, &pose);
        let th = Thresholds::default();
        let corr = associate(&pose, &maps, &target, &pose, &k, &th).unwrap();
        assert_eq!(corr.len(), maps.valid_count());
        for c in &corr {
            assert!(c.residual(&pose).abs() < 1e-9);
            assert!((c.target_uv.0 - c.pixel.0 as f64).abs() < 1e-6);
        }
        let again = associate(&pose, &maps, &target, &pose, &k, &th).unwrap();
        assert_eq!(corr, again);
        let far = PoseSE3::new(pose.rot, pose.trans + Vector3::new(10.0, 0.0, 0.0));
        let moved = as_prediction(&maps, &far);
        assert!(matches!(associate(&pose, &maps, &moved, &pose, &k, &th), Err(IcpError::Degenerate(0))));
    }

    #[test]
    fn planar_residuals_match_analytic_distance() {
        // fronto-parallel plane at z = 2, source moved by a small transform
        let k = Intrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60).unwrap();
        let frame = DepthFrame::new(80, 60, vec![2.0; 80 * 60], 0.0).unwrap();
        let maps: GeometryMaps<f64> = surface_measure(&frame, &k);
        let small = exp_map(&Twist::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.01, 0.02, 0.03)));
        let corr = associate(&small, &maps, &maps, &PoseSE3::identity(), &k, &Thresholds::default()).unwrap();
        assert!(corr.len() > 1000);
        for c in &corr {
            let p = small.transform(&c.source);
            let analytic = p.z - 2.0;
            assert!((c.residual(&small).abs() - analytic.abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn track_identical_frame_returns_prev_pose() {
        let pose = crate::synth::look_at(&Vector3::new(0.1, -0.4, 0.0), &Vector3::new(0.0, 0.15, 1.3));
        let (frame, k) = desk_maps(&pose);
        let pyr: Pyramid<f64> = build_pyramid(&frame, &k, &PyramidParams::default()).unwrap();
        let target = as_prediction(&pyr.levels[0].maps, &pose);
        for opt in IcpOptimizer::ALL {
            // coarse levels are smoothed, so their optimum is slightly off the
            // fine-level one; first-order methods get the fine level only
            let level_iters = if matches!(opt, IcpOptimizer::Gd | IcpOptimizer::Ncg) { vec![10] } else { vec![10, 5, 4] };
            let cfg = IcpConfig { optimizer: opt, level_iters, ..IcpConfig::default() };
            let r = track_frame(&target, &pose, &k, &pyr, &pose, &cfg, Some(&pose)).unwrap();
            let (ang, dist) = r.pose.distance_to(&pose);
            assert!(ang < 1e-6 && dist < 1e-6, "{opt}: {ang} {dist}");
        }
    }

    #[test]
    fn track_recovers_small_motion() {
        let pose = crate::synth::look_at(&Vector3::new(0.1, -0.4, 0.0), &Vector3::new(0.0, 0.15, 1.3));
        let moved = exp_map(&Twist::new(Vector3::new(0.01, -0.015, 0.005), Vector3::new(0.02, -0.01, 0.015))).compose(&pose);
        let (f0, k) = desk_maps(&pose);
        let (f1, _) = desk_maps(&moved);
        let p0: Pyramid<f64> = build_pyramid(&f0, &k, &PyramidParams::default()).unwrap();
        let p1: Pyramid<f64> = build_pyramid(&f1, &k, &PyramidParams::default()).unwrap();
        let target = as_prediction(&p0.levels[0].maps, &pose);
        for opt in IcpOptimizer::ALL {
            let cfg = IcpConfig { optimizer: opt, ..IcpConfig::default() };
            let r = track_frame(&target, &pose, &k, &p1, &pose, &cfg, Some(&moved)).unwrap();
            let (ang, dist) = r.pose.distance_to(&moved);
            let first = r.trace[0];
            assert!(r.trace.last().unwrap().loss < first.loss, "{opt}");
            if matches!(opt, IcpOptimizer::Newton | IcpOptimizer::Linearized) {
                assert!(ang.to_degrees() < 0.05 && dist < 0.001, "{opt}: {} deg {dist} m", ang.to_degrees());
            } else {
                assert!(dist < first.trans_err.unwrap() && ang.to_degrees() < first.rot_err.unwrap(), "{opt}");
            }
        }
    }

    #[test]
    fn config_validation_and_names() {
        assert!(IcpConfig::default().validate().is_ok());
        assert!(IcpConfig { level_iters: vec![31], ..IcpConfig::default() }.validate().is_err());
        assert!(IcpConfig { level_iters: vec![], ..IcpConfig::default() }.validate().is_err());
        for o in IcpOptimizer::ALL {
            assert_eq!(o.name().parse::<IcpOptimizer>().unwrap(), o);
        }
        assert!("lm".parse::<IcpOptimizer>().is_err());
    }
}
