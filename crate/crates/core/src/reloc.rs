//! Camera relocalization against a reference TSDF: the pose of a query depth
//! frame is refined by minimizing the squared difference between the
//! reference field and the field the query alone would produce.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::csfd::Scalar;
use crate::frames::{DepthFrame, Intrinsics};
use crate::optim::{self, Eta, Method, OptimConfig, OptimResult, PoseObjective};
use crate::se3::{exp_map, PoseSE3, Twist};
use crate::tsdf::{measure_point, CameraView, TsdfError, TsdfVolume, VolumeConfig};
use crate::util::pairwise_sum;

/// Query points farther than this from the reference count as outliers.
pub const OUTLIER_DISTANCE: f64 = 0.1;

/// Reference frames fused around the initial estimate.
pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Error)]
pub enum RelocError {
    #[error("no reference frames selected")]
    NoFrames,
    #[error("query and reference share no observed voxels")]
    NoOverlap,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
}

/// Indices of the `count` poses whose camera centers are nearest `init`,
/// nearest first.
pub fn nearest_frames(poses: &[PoseSE3<f64>], init: &PoseSE3<f64>, count: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = poses.iter().enumerate().map(|(i, p)| ((p.trans - init.trans).norm(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Fuse frames at their given poses into a fresh volume.
pub fn build_reference(
    frames: &[(&DepthFrame, PoseSE3<f64>)],
    k: &Intrinsics,
    config: VolumeConfig,
) -> Result<TsdfVolume<f64>, RelocError> {
    if frames.is_empty() {
        return Err(RelocError::NoFrames);
    }
    let mut vol = TsdfVolume::new(config)?;
    for (frame, pose) in frames {
        vol.integrate(frame, k, pose);
    }
    Ok(vol)
}

/// Sum of squared differences of `f` over voxels observed in both volumes,
/// `None` if there are none. Symmetric in its arguments.
pub fn volume_discrepancy(a: &TsdfVolume<f64>, b: &TsdfVolume<f64>) -> Option<f64> {
    let terms: Vec<f64> = (0..a.f.len())
        .filter(|&i| a.w[i] > 0.0 && b.w[i] > 0.0)
        .map(|i| (a.f[i] - b.f[i]).powi(2))
        .collect();
    (!terms.is_empty()).then(|| pairwise_sum(&terms))
}

/// Squared difference at each listed voxel, `None` where the query leaves
/// it unobserved. The query field at a voxel equals a single fusion of the
/// query frame into a fresh volume: the truncated distance itself.
pub fn voxel_terms<S: Scalar>(
    pose: &PoseSE3<S>,
    reference: &TsdfVolume<f64>,
    voxels: &[usize],
    query: &DepthFrame,
    k: &Intrinsics,
) -> Vec<Option<S>> {
    let cfg = &reference.config;
    let cam = CameraView::new(pose);
    voxels
        .par_iter()
        .map(|&i| {
            let [x, y, z] = cfg.coords(i);
            let fq = measure_point(&cfg.voxel_center(x, y, z), &cam, query, k, cfg.mu)?;
            let d = fq - reference.f[i];
            Some(d * d)
        })
        .collect()
}

fn squared_terms<S: Scalar>(
    pose: &PoseSE3<S>,
    reference: &TsdfVolume<f64>,
    voxels: &[usize],
    query: &DepthFrame,
    k: &Intrinsics,
) -> Vec<S> {
    voxel_terms(pose, reference, voxels, query, k).into_iter().flatten().collect()
}

/// Discrepancy between the reference and the query fused at `pose`, over
/// mutually observed voxels.
pub fn reloc_energy<S: Scalar>(
    pose: &PoseSE3<S>,
    reference: &TsdfVolume<f64>,
    query: &DepthFrame,
    k: &Intrinsics,
) -> Result<S, RelocError> {
    let observed: Vec<usize> = (0..reference.w.len()).filter(|&i| reference.w[i] > 0.0).collect();
    let terms = squared_terms(pose, reference, &observed, query, k);
    if terms.is_empty() {
        return Err(RelocError::NoOverlap);
    }
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelocMethod {
    Gd,
    Newton,
}

impl RelocMethod {
    pub fn name(self) -> &'static str {
        match self {
            RelocMethod::Gd => "gd",
            RelocMethod::Newton => "newton",
        }
    }
}

impl std::str::FromStr for RelocMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(RelocMethod::Gd),
            "newton" => Ok(RelocMethod::Newton),
            _ => Err(format!("unknown relocalization method '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelocConfig {
    /// Newton directions are used once the loss is below this threshold.
    pub eta: Eta,
    pub optim: OptimConfig,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self { eta: Eta::default(), optim: OptimConfig { max_iters: 50, ..OptimConfig::default() } }
    }
}

pub struct RelocProblem<'a> {
    pub reference: &'a TsdfVolume<f64>,
    pub query: &'a DepthFrame,
    pub k: &'a Intrinsics,
    pub init: PoseSE3<f64>,
}

#[derive(Debug, Clone)]
pub struct RelocResult {
    pub method: RelocMethod,
    pub result: OptimResult,
}

/// The objective about the prepared pose. Real evaluations use every voxel
/// the reference observed; derivative passes use only voxels whose query
/// value lies strictly inside the truncation band, since all others are
/// locally constant or unobserved.
pub struct RelocObjective<'a> {
    problem: &'a RelocProblem<'a>,
    observed: Vec<usize>,
    active: Vec<usize>,
    pose: PoseSE3<f64>,
}

impl<'a> RelocObjective<'a> {
    pub fn new(problem: &'a RelocProblem<'a>) -> Self {
        let r = problem.reference;
        let observed = (0..r.w.len()).filter(|&i| r.w[i] > 0.0).collect();
        Self { problem, observed, active: Vec::new(), pose: problem.init }
    }

    fn at<S: Scalar>(&self, xi: &Twist<S>, voxels: &[usize]) -> Vec<S> {
        let pose = exp_map(xi).compose(&self.pose.lift());
        squared_terms(&pose, self.problem.reference, voxels, self.problem.query, self.problem.k)
    }
}

impl PoseObjective for RelocObjective<'_> {
    type Error = RelocError;

    fn prepare(&mut self, pose: &PoseSE3<f64>) -> Result<(), RelocError> {
        self.pose = *pose;
        let p = self.problem;
        let cfg = &p.reference.config;
        let cam = CameraView::new(pose);
        self.active = self
            .observed
            .par_iter()
            .copied()
            .filter(|&i| {
                let [x, y, z] = cfg.coords(i);
                measure_point::<f64>(&cfg.voxel_center(x, y, z), &cam, p.query, p.k, cfg.mu).is_some_and(|f| f < 1.0)
            })
            .collect();
        if self.active.is_empty() && self.at(&Twist::<f64>::zero(), &self.observed).is_empty() {
            return Err(RelocError::NoOverlap);
        }
        Ok(())
    }

    fn energy(&self, xi: &Twist<f64>) -> f64 {
        let terms = self.at(xi, &self.observed);
        if terms.is_empty() {
            f64::INFINITY
        } else {
            pairwise_sum(&terms)
        }
    }

    fn energy_perturbed<S: Scalar>(&self, xi: &Twist<S>) -> S {
        pairwise_sum(&self.at(xi, &self.active))
    }
}

/// Refine `problem.init`. Gradient descent uses the curvature-initialized
/// backtracking search; Newton mode switches to Newton directions once the
/// loss falls below the threshold.
pub fn optimize(
    problem: &RelocProblem<'_>,
    method: RelocMethod,
    cfg: &RelocConfig,
    truth: Option<&PoseSE3<f64>>,
) -> Result<RelocResult, RelocError> {
    let mut obj = RelocObjective::new(problem);
    let m = match method {
        RelocMethod::Gd => Method::Gd,
        RelocMethod::Newton => Method::SwitchedNewton(cfg.eta),
    };
    let result = optim::optimize(&mut obj, problem.init, m, &cfg.optim, truth)?;
    Ok(RelocResult { method, result })
}

/// One query refined by each requested method.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// Reference frame indices, nearest first.
    pub neighbors: Vec<usize>,
    pub results: Vec<RelocResult>,
}

/// Refine the pose of `frames[query]` from `init` against a reference fused
/// from the `neighbors` frames nearest `init` at their known `poses`. The
/// query frame itself is never part of its reference.
#[allow(clippy::too_many_arguments)]
pub fn relocalize_query(
    frames: &[DepthFrame],
    poses: &[PoseSE3<f64>],
    query: usize,
    init: &PoseSE3<f64>,
    k: &Intrinsics,
    volume: VolumeConfig,
    neighbors: usize,
    methods: &[RelocMethod],
    cfg: &RelocConfig,
) -> Result<QueryOutcome, RelocError> {
    let others: Vec<usize> = (0..poses.len()).filter(|&i| i != query).collect();
    let candidates: Vec<PoseSE3<f64>> = others.iter().map(|&i| poses[i]).collect();
    let chosen: Vec<usize> = nearest_frames(&candidates, init, neighbors).into_iter().map(|j| others[j]).collect();
    let refs: Vec<(&DepthFrame, PoseSE3<f64>)> = chosen.iter().map(|&i| (&frames[i], poses[i])).collect();
    let reference = build_reference(&refs, k, volume)?;
    let problem = RelocProblem { reference: &reference, query: &frames[query], k, init: *init };
    let truth = poses.get(query);
    let results = methods.iter().map(|&m| optimize(&problem, m, cfg, truth)).collect::<Result<_, _>>()?;
    Ok(QueryOutcome { neighbors: chosen, results })
}

/// Mean nearest-neighbor distance from the query cloud placed by `pose` to
/// the reference cloud, and whether it marks the query as an outlier.
pub fn eval_nn_error(pose: &PoseSE3<f64>, query: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<(f64, bool), RelocError> {
    if query.is_empty() || reference.is_empty() {
        return Err(RelocError::EmptyCloud);
    }
    let d: Vec<f64> = query
        .par_iter()
        .map(|q| {
            let p = pose.transform(q);
            reference.iter().map(|r| (r - p).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
        })
        .collect();
    let mean = pairwise_sum(&d) / d.len() as f64;
    Ok((mean, mean > OUTLIER_DISTANCE))
}

/// Valid pixels of a frame back-projected into camera coordinates, every
/// `stride`-th pixel.
pub fn frame_cloud(frame: &DepthFrame, k: &Intrinsics, stride: usize) -> Vec<Vector3<f64>> {
    (0..frame.width * frame.height)
        .step_by(stride.max(1))
        .filter_map(|i| {
            let (x, y) = (i % frame.width, i / frame.width);
            let d = frame.filtered[i];
            (d > 0.0).then(|| k.ray::<f64>(x as f64, y as f64) * d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csfd::StepSize;
    use crate::synth::{look_at, render_depth, Scene, TraceParams};
    use nalgebra::{Matrix6, Vector6};
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn k() -> Intrinsics {
        Intrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn volume() -> VolumeConfig {
        VolumeConfig::cube(64, 0.04, Vector3::new(0.0, 0.1, 1.3))
    }

    fn render(pose: &PoseSE3<f64>) -> DepthFrame {
        DepthFrame::new(160, 120, render_depth(&Scene::desk(), pose, &k(), &TraceParams::default()), 0.0).unwrap()
    }

    fn query_pose() -> PoseSE3<f64> {
        look_at(&Vector3::new(0.1, -0.45, 0.05), &Vector3::new(0.0, 0.15, 1.3))
    }

    #[test]
    fn reference_examples() {
        let k = k();
        assert!(matches!(build_reference(&[], &k, volume()), Err(RelocError::NoFrames)));
        let pose = query_pose();
        let f = render(&pose);
        let one = build_reference(&[(&f, pose)], &k, volume()).unwrap();
        let two = build_reference(&[(&f, pose), (&f, pose)], &k, volume()).unwrap();
        for i in 0..one.f.len() {
            assert!((one.f[i] - two.f[i]).abs() < 1e-12);
            assert_eq!(two.w[i], 2.0 * one.w[i]);
        }
        let pred = crate::tsdf::raycast(&one, &pose, &k, &crate::tsdf::RaycastParams::for_volume(&one));
        let inv = pose.inverse();
        let errs: Vec<f64> = (0..pred.vertices.len())
            .filter(|&i| pred.valid[i] && f.filtered[i] > 0.0)
            .map(|i| (inv.transform(&pred.vertices[i]).z - f.filtered[i]).abs())
            .collect();
        assert!(crate::util::median(&errs).unwrap() <= 0.04);
        let poses = [pose, PoseSE3::identity(), PoseSE3::new(pose.rot, pose.trans + Vector3::x())];
        assert_eq!(nearest_frames(&poses, &pose, 2), vec![0, 1]);
    }

    #[test]
    fn energy_examples() {
        let k = k();
        let pose = query_pose();
        let f = render(&pose);
        let reference = build_reference(&[(&f, pose)], &k, volume()).unwrap();
        assert!(reloc_energy(&pose, &reference, &f, &k).unwrap() <= 1e-8);
        let other = exp_map(&Twist::new(Vector3::new(0.02, -0.03, 0.01), Vector3::new(0.03, 0.02, -0.02))).compose(&pose);
        let e = reloc_energy(&other, &reference, &f, &k).unwrap();
        assert!(e > 1e-3);
        // same value as a discrepancy between fused volumes, in either order
        let fused = build_reference(&[(&f, other)], &k, volume()).unwrap();
        assert!((volume_discrepancy(&reference, &fused).unwrap() - e).abs() <= 1e-9 * e);
        assert_eq!(volume_discrepancy(&reference, &fused), volume_discrepancy(&fused, &reference));
        let empty = TsdfVolume::new(volume()).unwrap();
        assert!(matches!(reloc_energy(&pose, &empty, &f, &k), Err(RelocError::NoOverlap)));
    }

    fn scene() -> (TsdfVolume<f64>, DepthFrame, PoseSE3<f64>) {
        let k = k();
        let center = Vector3::new(0.0, 0.15, 1.3);
        let poses: Vec<PoseSE3<f64>> = (0..6)
            .map(|i| {
                let a = (i as f64 - 2.5) * 0.08;
                look_at(&Vector3::new(1.2 * a.sin(), -0.45, 1.3 - 1.2 * a.cos()), &center)
            })
            .collect();
        let frames: Vec<DepthFrame> = poses.iter().map(render).collect();
        let refs: Vec<(&DepthFrame, PoseSE3<f64>)> = frames.iter().zip(poses.iter().copied()).collect();
        let truth = query_pose();
        (build_reference(&refs, &k, volume()).unwrap(), render(&truth), truth)
    }

    #[test]
    fn gradient_matches_fd() {
        let (reference, query, truth) = scene();
        let k = k();
        let problem = RelocProblem { reference: &reference, query: &query, k: &k, init: truth };
        let mut obj = RelocObjective::new(&problem);
        let observed: Vec<usize> = (0..reference.w.len()).filter(|&i| reference.w[i] > 0.0).collect();
        let h = StepSize::default();
        let eps = 1e-6;
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let xi = Twist::from_vector(&Vector6::from_fn(|i, _| if i < 3 { rng.random_range(-0.03..0.03) } else { rng.random_range(-0.04..0.04) }));
            let pose = exp_map(&xi).compose(&truth);
            obj.prepare(&pose).unwrap();
            let g = optim::gradient(&obj, h);
            // the energy has jumps where voxels enter or leave the query's
            // observed set; difference only voxels observed at 0 and ±eps
            let base = voxel_terms(&pose, &reference, &observed, &query, &k);
            let fd = Vector6::from_fn(|i, _| {
                let mut d = Vector6::zeros();
                d[i] = eps;
                let at = |v: Vector6<f64>| voxel_terms(&exp_map(&Twist::from_vector(&v)).compose(&pose), &reference, &observed, &query, &k);
                let (p, m) = (at(d), at(-d));
                let diffs: Vec<f64> = (0..observed.len())
                    .filter_map(|j| Some((p[j]? - m[j]?) / (2.0 * eps)).filter(|_| base[j].is_some()))
                    .collect();
                pairwise_sum(&diffs)
            });
            assert!((g - fd).norm() <= 1e-4 * g.norm(), "{g} {fd}");
        }
    }

    #[test]
    fn stationary_at_truth_of_single_frame_reference() {
        let k = k();
        let truth = query_pose();
        let query = render(&truth);
        let reference = build_reference(&[(&query, truth)], &k, volume()).unwrap();
        let problem = RelocProblem { reference: &reference, query: &query, k: &k, init: truth };
        let mut obj = RelocObjective::new(&problem);
        obj.prepare(&truth).unwrap();
        let (g, hess) = optim::gradient_hessian(&obj, StepSize::default());
        assert!(g.norm() <= 1e-6 * (1.0 + hess.norm()), "{g}");
        let eig = Matrix6::from(hess).symmetric_eigenvalues();
        assert!(eig.min() >= -1e-8 * hess.norm(), "{eig}");
        let at_truth = optimize(&problem, RelocMethod::Newton, &RelocConfig::default(), Some(&truth)).unwrap().result;
        assert!(at_truth.converged && at_truth.iterations <= 1);
        assert_eq!(at_truth.pose, truth);
    }

    #[test]
    fn newton_and_gd_recover_perturbed_pose() {
        let (reference, query, truth) = scene();
        let k = k();
        let xi = Twist::new(Vector3::new(0.03, -0.04, 0.02).normalize() * 3f64.to_radians(), Vector3::new(-0.03, 0.03, 0.025));
        let init = exp_map(&xi).compose(&truth);
        let problem = RelocProblem { reference: &reference, query: &query, k: &k, init };
        let cfg = RelocConfig::default();
        let newton = optimize(&problem, RelocMethod::Newton, &cfg, Some(&truth)).unwrap().result;
        let gd = optimize(&problem, RelocMethod::Gd, &cfg, Some(&truth)).unwrap().result;
        for r in [&newton, &gd] {
            for w in r.trace.windows(2) {
                assert!(w[1].loss <= w[0].loss + 1e-12);
            }
        }
        let (ang, dist) = newton.pose.distance_to(&truth);
        assert!(ang.to_degrees() <= 0.5 && dist <= 0.01, "{} {dist}", ang.to_degrees());
        assert!(newton.iterations < gd.iterations || newton.trace.last().unwrap().loss < gd.trace.last().unwrap().loss);
    }

    #[test]
    fn switched_steps_equal_gd_above_threshold() {
        let (reference, query, truth) = scene();
        let k = k();
        let init = exp_map(&Twist::new(Vector3::new(0.0, 0.03, 0.0), Vector3::new(0.04, 0.0, 0.0))).compose(&truth);
        let problem = RelocProblem { reference: &reference, query: &query, k: &k, init };
        let forced = RelocConfig { eta: Eta::Absolute(0.0), optim: OptimConfig { max_iters: 3, ..OptimConfig::default() } };
        let newton = optimize(&problem, RelocMethod::Newton, &forced, None).unwrap().result;
        let gd = optimize(&problem, RelocMethod::Gd, &forced, None).unwrap().result;
        assert_eq!(newton.pose, gd.pose);
        assert_eq!(newton.trace, gd.trace);
    }

    #[test]
    fn nn_error_examples() {
        let mut rng = StdRng::seed_from_u64(8);
        let cloud: Vec<Vector3<f64>> = (0..2000)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)))
            .collect();
        assert_eq!(eval_nn_error(&PoseSE3::identity(), &cloud, &cloud).unwrap(), (0.0, false));
        let shift = Vector3::new(1e-3, 0.0, 0.0);
        let shifted: Vec<_> = cloud.iter().map(|p| p + shift).collect();
        let t = PoseSE3::new(nalgebra::Matrix3::identity(), shift);
        assert!(eval_nn_error(&t, &cloud, &shifted).unwrap().0 < 1e-15);
        // a dense plane displaced along its normal: every nearest neighbor is
        // the foot of the perpendicular
        let plane: Vec<Vector3<f64>> = (0..10_000).map(|i| Vector3::new((i % 100) as f64 * 0.01, (i / 100) as f64 * 0.01, 1.0)).collect();
        let query: Vec<Vector3<f64>> = plane.iter().filter(|p| p.x > 0.2 && p.x < 0.8 && p.y > 0.2 && p.y < 0.8).copied().collect();
        let up = PoseSE3::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 0.05));
        let (e, outlier) = eval_nn_error(&up, &query, &plane).unwrap();
        assert!((e - 0.05).abs() < 1e-12 && !outlier);
        let far = PoseSE3::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 0.2));
        assert!(eval_nn_error(&far, &query, &plane).unwrap().1);
        assert!(matches!(eval_nn_error(&up, &[], &plane), Err(RelocError::EmptyCloud)));
    }
}
