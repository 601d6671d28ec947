//! Chaining a downstream score's gradient through the surfel map to the
//! camera pose.
//!
//! A score maps an object's point set to a scalar and reports per-point
//! gradients. The surfel update, run once per twist component with that
//! component seeded, carries `∂p/∂ξᵢ` in each surfel's imaginary channel; the
//! chained gradient is the contraction `Σ_p ∂S/∂p · ∂p/∂ξᵢ`.

use std::io::Write as _;
use std::process::{Command, Stdio};

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::csfd::{ComplexScalar, StepSize};
use crate::frames::{GeometryMaps, Intrinsics};
use crate::se3::{PoseSE3, Twist};
use crate::surfel::{associate_frame, render_index_map, update_surfels, PixelAssociation, SurfelMap, SurfelParams};
use crate::util::pairwise_sum;

/// First line of every request sent to an external score process.
pub const PROTOCOL_HEADER: &str = "cstep-score v1";

#[derive(Debug, Error)]
pub enum TaskGradError {
    #[error("no seeded pass for twist component {0}")]
    MissingSeed(usize),
    #[error("surfel {0} is not a live surfel of the seeded map")]
    UnknownSurfel(usize),
    #[error("object has no surfels")]
    EmptyObject,
    #[error("score `{descriptor}` gradient disagrees with finite differences (relative error {error:e})")]
    GradientMismatch { descriptor: String, error: f64 },
    #[error("score returned {got} gradients for {expected} points")]
    GradientCount { expected: usize, got: usize },
    #[error("score process: {0}")]
    Process(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Score value and its gradient with respect to every input point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreValue {
    pub score: f64,
    pub gradients: Vec<Vector3<f64>>,
}

pub trait ScoreFunction: Send + Sync {
    fn descriptor(&self) -> String;
    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError>;
}

/// Negative distance of the point-set centroid to a target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidDistance {
    pub target: Vector3<f64>,
}

impl ScoreFunction for CentroidDistance {
    fn descriptor(&self) -> String {
        format!("centroid-distance target=({}, {}, {})", self.target.x, self.target.y, self.target.z)
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        if points.is_empty() {
            return Err(TaskGradError::EmptyObject);
        }
        let n = points.len() as f64;
        let c = points.iter().sum::<Vector3<f64>>() / n;
        let d = c - self.target;
        let dist = d.norm();
        let g = if dist > 0.0 { -d / (dist * n) } else { Vector3::zeros() };
        Ok(ScoreValue { score: -dist, gradients: vec![g; points.len()] })
    }
}

/// Soft count of points inside a view cone: each point contributes
/// `σ(κ·(cos θ − cos α))`, where θ is its angle from the cone axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityCone {
    pub apex: Vector3<f64>,
    /// Unit axis.
    pub axis: Vector3<f64>,
    pub half_angle: f64,
    pub sharpness: f64,
}

impl VisibilityCone {
    pub fn new(apex: Vector3<f64>, axis: Vector3<f64>, half_angle: f64, sharpness: f64) -> Self {
        Self { apex, axis: axis.normalize(), half_angle, sharpness }
    }
}

impl ScoreFunction for VisibilityCone {
    fn descriptor(&self) -> String {
        format!(
            "visibility-cone apex=({}, {}, {}) axis=({}, {}, {}) half_angle={} sharpness={}",
            self.apex.x, self.apex.y, self.apex.z, self.axis.x, self.axis.y, self.axis.z, self.half_angle, self.sharpness
        )
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        let cos_a = self.half_angle.cos();
        let per: Vec<(f64, Vector3<f64>)> = points
            .par_iter()
            .map(|p| {
                let d = p - self.apex;
                let r = d.norm();
                if r == 0.0 {
                    return (0.0, Vector3::zeros());
                }
                let u = d / r;
                let cos_t = u.dot(&self.axis);
                let s = 1.0 / (1.0 + (-self.sharpness * (cos_t - cos_a)).exp());
                // ∂cosθ/∂p = (axis − cosθ·u) / r
                let g = (self.axis - u * cos_t) / r * (self.sharpness * s * (1.0 - s));
                (s, g)
            })
            .collect();
        let scores: Vec<f64> = per.iter().map(|x| x.0).collect();
        Ok(ScoreValue { score: pairwise_sum(&scores), gradients: per.into_iter().map(|x| x.1).collect() })
    }
}

/// `Σ w·p`: linear in every point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearScore {
    pub weights: Vector3<f64>,
}

impl ScoreFunction for LinearScore {
    fn descriptor(&self) -> String {
        format!("linear weights=({}, {}, {})", self.weights.x, self.weights.y, self.weights.z)
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        let terms: Vec<f64> = points.iter().map(|p| self.weights.dot(p)).collect();
        Ok(ScoreValue { score: pairwise_sum(&terms), gradients: vec![self.weights; points.len()] })
    }
}

/// A score that ignores its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScore(pub f64);

impl ScoreFunction for ConstantScore {
    fn descriptor(&self) -> String {
        format!("constant {}", self.0)
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        Ok(ScoreValue { score: self.0, gradients: vec![Vector3::zeros(); points.len()] })
    }
}

/// `−Σ ‖p − c₀‖²` about a fixed reference centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadScore {
    pub centroid: Vector3<f64>,
}

impl ScoreFunction for SpreadScore {
    fn descriptor(&self) -> String {
        format!("spread centroid=({}, {}, {})", self.centroid.x, self.centroid.y, self.centroid.z)
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        let terms: Vec<f64> = points.iter().map(|p| -(p - self.centroid).norm_squared()).collect();
        let gradients = points.iter().map(|p| -2.0 * (p - self.centroid)).collect();
        Ok(ScoreValue { score: pairwise_sum(&terms), gradients })
    }
}

/// `Σ aₖ·Sₖ`.
pub struct WeightedSum(pub Vec<(f64, Box<dyn ScoreFunction>)>);

impl ScoreFunction for WeightedSum {
    fn descriptor(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|(a, s)| format!("{a}·[{}]", s.descriptor())).collect();
        parts.join(" + ")
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        let mut out = ScoreValue { score: 0.0, gradients: vec![Vector3::zeros(); points.len()] };
        for (a, s) in &self.0 {
            let v = s.evaluate(points)?;
            out.score += a * v.score;
            for (g, d) in out.gradients.iter_mut().zip(&v.gradients) {
                *g += d * *a;
            }
        }
        Ok(out)
    }
}

/// A score computed by an external program.
///
/// Request on stdin: the header line `cstep-score v1 <n>`, then `n` lines of
/// `x y z`. Response on stdout: the score on the first line, then `n` lines of
/// gradient triples `gx gy gz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScore {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalScore {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self { program: program.into(), args }
    }
}

/// Serialize a request for the external score protocol.
pub fn encode_request(points: &[Vector3<f64>]) -> String {
    let mut s = format!("{PROTOCOL_HEADER} {}\n", points.len());
    for p in points {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    s
}

/// Parse a response of the external score protocol for `n` points.
pub fn decode_response(text: &str, n: usize) -> Result<ScoreValue, TaskGradError> {
    let bad = |line: usize, msg: &str| TaskGradError::Process(format!("response line {line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (ln, first) = lines.next().ok_or_else(|| bad(1, "missing score"))?;
    let score: f64 = first.trim().parse().map_err(|_| bad(ln + 1, "score is not a number"))?;
    let mut gradients = Vec::with_capacity(n);
    for (ln, line) in lines {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(ln + 1, "gradient is not numeric"))?;
        if v.len() != 3 {
            return Err(bad(ln + 1, "gradient needs three components"));
        }
        gradients.push(Vector3::new(v[0], v[1], v[2]));
    }
    if gradients.len() != n {
        return Err(TaskGradError::GradientCount { expected: n, got: gradients.len() });
    }
    Ok(ScoreValue { score, gradients })
}

impl ScoreFunction for ExternalScore {
    fn descriptor(&self) -> String {
        std::iter::once(self.program.as_str()).chain(self.args.iter().map(String::as_str)).collect::<Vec<_>>().join(" ")
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let request = encode_request(points);
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(request.as_bytes()));
        let out = child.wait_with_output()?;
        writer.join().map_err(|_| TaskGradError::Process("writer thread panicked".into()))??;
        if !out.status.success() {
            return Err(TaskGradError::Process(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        decode_response(&String::from_utf8_lossy(&out.stdout), points.len())
    }
}

/// Largest relative disagreement between a score's reported gradient and
/// central differences, over every coordinate of `points`.
pub fn gradient_check(score: &dyn ScoreFunction, points: &[Vector3<f64>]) -> Result<f64, TaskGradError> {
    let base = score.evaluate(points)?;
    if base.gradients.len() != points.len() {
        return Err(TaskGradError::GradientCount { expected: points.len(), got: base.gradients.len() });
    }
    let mut worst_abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut moved = points.to_vec();
    for j in 0..points.len() {
        for a in 0..3 {
            let step = 1e-6 * points[j][a].abs().max(1.0);
            moved[j][a] = points[j][a] + step;
            let plus = score.evaluate(&moved)?.score;
            moved[j][a] = points[j][a] - step;
            let minus = score.evaluate(&moved)?.score;
            moved[j][a] = points[j][a];
            let fd = (plus - minus) / (2.0 * step);
            worst_abs = worst_abs.max((fd - base.gradients[j][a]).abs());
            scale = scale.max(base.gradients[j][a].abs());
        }
    }
    Ok(if scale > 0.0 { worst_abs / scale } else { worst_abs })
}

/// Points used to validate a score: at most this many from the probe cloud.
pub const REGISTRATION_PROBES: usize = 24;
/// Relative tolerance of the registration gradient check.
pub const REGISTRATION_TOLERANCE: f64 = 1e-5;

/// A score whose gradient was checked against finite differences.
pub struct RegisteredScore {
    inner: Box<dyn ScoreFunction>,
}

impl RegisteredScore {
    /// Validate `score` on an evenly spaced subset of `probe`.
    pub fn register(score: Box<dyn ScoreFunction>, probe: &[Vector3<f64>]) -> Result<Self, TaskGradError> {
        if probe.is_empty() {
            return Err(TaskGradError::EmptyObject);
        }
        let stride = probe.len().div_ceil(REGISTRATION_PROBES);
        let subset: Vec<Vector3<f64>> = probe.iter().step_by(stride).copied().collect();
        let error = gradient_check(score.as_ref(), &subset)?;
        if error > REGISTRATION_TOLERANCE {
            return Err(TaskGradError::GradientMismatch { descriptor: score.descriptor(), error });
        }
        Ok(Self { inner: score })
    }
}

impl ScoreFunction for RegisteredScore {
    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }

    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<ScoreValue, TaskGradError> {
        self.inner.evaluate(points)
    }
}

/// A surfel map after an update run with one twist component seeded.
#[derive(Debug, Clone)]
pub struct SeededMap {
    pub component: usize,
    pub h: StepSize,
    pub map: SurfelMap<ComplexScalar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainedGradient {
    pub ds_dxi: Vector6<f64>,
    pub score: f64,
    /// Per object surfel, its share of the gradient.
    pub contributions: Vec<Vector6<f64>>,
}

/// Contract the score's per-point gradients with `∂p/∂ξᵢ` read from the
/// seeded maps. `passes` must contain one map per twist component.
pub fn chain_pose_gradient(
    passes: &[SeededMap],
    object: &[usize],
    score: &dyn ScoreFunction,
) -> Result<ChainedGradient, TaskGradError> {
    if object.is_empty() {
        return Err(TaskGradError::EmptyObject);
    }
    let mut by_component: [Option<&SeededMap>; 6] = [None; 6];
    for p in passes {
        if p.component < 6 && by_component[p.component].is_none() {
            by_component[p.component] = Some(p);
        }
    }
    let seeded: Vec<&SeededMap> =
        by_component.iter().enumerate().map(|(i, p)| p.ok_or(TaskGradError::MissingSeed(i))).collect::<Result<_, _>>()?;
    // an index no pass knows is unknown; one only some passes lack is unseeded
    let longest = seeded.iter().map(|p| p.map.surfels.len()).max().unwrap_or(0);
    for &j in object {
        if j >= longest {
            return Err(TaskGradError::UnknownSurfel(j));
        }
        if let Some(p) = seeded.iter().find(|p| j >= p.map.surfels.len() || !p.map.live[j]) {
            return Err(if j < p.map.surfels.len() { TaskGradError::UnknownSurfel(j) } else { TaskGradError::MissingSeed(p.component) });
        }
    }
    let reference = &seeded[0].map;
    let points: Vec<Vector3<f64>> = object.iter().map(|&j| reference.surfels[j].v.map(|x| x.re)).collect();
    let value = score.evaluate(&points)?;
    if value.gradients.len() != points.len() {
        return Err(TaskGradError::GradientCount { expected: points.len(), got: value.gradients.len() });
    }
    let contributions: Vec<Vector6<f64>> = object
        .par_iter()
        .zip(value.gradients.par_iter())
        .map(|(&j, g)| {
            Vector6::from_fn(|i, _| {
                let p = &seeded[i];
                let dp = p.map.surfels[j].v.map(|x| x.im / p.h.get());
                g.dot(&dp)
            })
        })
        .collect();
    let d_s = Vector6::from_fn(|i, _| {
        let col: Vec<f64> = contributions.iter().map(|c| c[i]).collect();
        pairwise_sum(&col)
    });
    Ok(ChainedGradient { ds_dxi: d_s, score: value.score, contributions })
}

/// Fuse `frame` into `map` at `pose` once per twist component with that
/// component seeded. The association is computed once on real values and
/// shared by all passes; it is returned alongside the seeded maps.
pub fn seeded_fusion(
    map: &SurfelMap<f64>,
    frame: &GeometryMaps<f64>,
    pose: &PoseSE3<f64>,
    k: &Intrinsics,
    frame_index: usize,
    params: &SurfelParams,
    h: StepSize,
) -> (Vec<SeededMap>, Vec<PixelAssociation>) {
    let idx = render_index_map(map, pose, k);
    let assoc = associate_frame(frame, &idx, map, pose, params);
    let frame_c: GeometryMaps<ComplexScalar> = frame.lift();
    let passes = (0..6)
        .into_par_iter()
        .map(|i| {
            let mut m: SurfelMap<ComplexScalar> = map.lift();
            update_surfels(&mut m, &assoc, &frame_c, &pose.perturbed(&Twist::zero().seed(i, h)), k, frame_index, params.sigma);
            SeededMap { component: i, h, map: m }
        })
        .collect();
    (passes, assoc)
}

/// Hessian by central differences of a gradient function, symmetrized.
pub fn fd_hessian_from_gradients<F>(grad_fn: F, xi: &Twist<f64>, step: f64) -> Matrix6<f64>
where
    F: Fn(&Twist<f64>) -> Vector6<f64>,
{
    let mut h = Matrix6::zeros();
    for j in 0..6 {
        let mut plus = *xi;
        plus.set(j, xi.get(j) + step);
        let mut minus = *xi;
        minus.set(j, xi.get(j) - step);
        h.set_column(j, &((grad_fn(&plus) - grad_fn(&minus)) / (2.0 * step)));
    }
    (h + h.transpose()) * 0.5
}
