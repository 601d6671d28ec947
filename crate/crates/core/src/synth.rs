//! Synthetic depth sequences: analytic signed-distance scenes rendered by
//! sphere tracing, smooth camera trajectories and a depth noise model.

use std::fmt;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::frames::{DepthFrame, Intrinsics};
use crate::se3::PoseSE3;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Oriented box: `rot` maps box axes to the world.
    Cuboid { center: Vector3<f64>, half: Vector3<f64>, rot: Matrix3<f64> },
    /// Half-space boundary `n·p = offset` with unit `n` pointing to free space.
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Cuboid { center, half, rot } => {
                let q = (rot.transpose() * (p - center)).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Primitive::Plane { normal, offset } => normal.dot(p) - offset,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Table plane with a few objects in front of the default volume center,
    /// used by the tests and the default synth configuration.
    pub fn desk() -> Self {
        let rot = |v: Vector3<f64>| Rotation3::new(v).into_inner();
        Self {
            primitives: vec![
                Primitive::Plane { normal: Vector3::new(0.0, -1.0, 0.0), offset: -0.35 },
                Primitive::Sphere { center: Vector3::new(-0.25, 0.15, 1.3), radius: 0.2 },
                Primitive::Sphere { center: Vector3::new(0.3, 0.22, 1.1), radius: 0.13 },
                Primitive::Cuboid {
                    center: Vector3::new(0.15, 0.2, 1.55),
                    half: Vector3::new(0.18, 0.15, 0.12),
                    rot: rot(Vector3::new(0.0, 0.5, 0.0)),
                },
                Primitive::Cuboid {
                    center: Vector3::new(-0.2, 0.27, 0.95),
                    half: Vector3::new(0.08, 0.08, 0.08),
                    rot: rot(Vector3::new(0.2, 0.3, 0.1)),
                },
                Primitive::Plane { normal: Vector3::new(0.0, 0.0, -1.0), offset: -2.2 },
            ],
        }
    }
}

/// Per-pixel depth noise with standard deviation `a + b·d²`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    pub a: f64,
    pub b: f64,
}

impl NoiseModel {
    pub fn sigma(&self, d: f64) -> f64 {
        self.a + self.b * d * d
    }

    pub fn is_zero(&self) -> bool {
        self.a == 0.0 && self.b == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParams {
    pub max_depth: f64,
    pub max_steps: usize,
    pub epsilon: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self { max_depth: 10.0, max_steps: 512, epsilon: 1e-9 }
    }
}

/// Distance along a unit ray to the first surface, by sphere tracing.
pub fn trace(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, params: &TraceParams) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..params.max_steps {
        let d = scene.sdf(&(origin + dir * t));
        if d.abs() <= params.epsilon {
            return Some(t);
        }
        if d < 0.0 {
            // started inside geometry
            return None;
        }
        t += d;
        if t > params.max_depth {
            return None;
        }
    }
    None
}

/// Noise-free depth image (z in camera coordinates, 0 where nothing is hit).
pub fn render_depth(scene: &Scene, pose: &PoseSE3<f64>, k: &Intrinsics, params: &TraceParams) -> Vec<f64> {
    use rayon::prelude::*;
    (0..k.width * k.height)
        .into_par_iter()
        .map(|i| {
            let r = k.ray((i % k.width) as f64, (i / k.width) as f64);
            let scale = r.norm();
            let dir = pose.rot * (r / scale);
            trace(scene, &pose.trans, &dir, params).map(|t| t / scale).filter(|&z| z > 0.0).unwrap_or(0.0)
        })
        .collect()
}

/// Add noise drawn from `model` with a generator seeded by `seed`.
pub fn add_noise(depth: &mut [f64], model: &NoiseModel, seed: u64) {
    if model.is_zero() {
        return;
    }
    let mut rng = StdRng::seed_from_u64(seed);
    for d in depth.iter_mut() {
        if *d > 0.0 {
            let n = Normal::new(0.0, model.sigma(*d)).expect("finite sigma");
            *d = (*d + n.sample(&mut rng)).max(1e-6);
        }
    }
}

/// Camera position and the point it looks at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    pub target: Vector3<f64>,
}

/// Camera → global pose looking from `eye` at `target`, with image y pointing
/// along global +y as far as possible.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> PoseSE3<f64> {
    let z = (target - eye).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z);
    let x = if x.norm() < 1e-9 { Vector3::x() } else { x.normalize() };
    let y = z.cross(&x);
    PoseSE3::new(Matrix3::from_columns(&[x, y, z]), *eye)
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2 + (p3 - p0 + p1 * 3.0 - p2 * 3.0) * t3) * 0.5
}

/// `frames` poses along a Catmull-Rom spline through the waypoints, evenly
/// spaced in the spline parameter.
pub fn spline_trajectory(waypoints: &[Waypoint], frames: usize) -> Result<Vec<PoseSE3<f64>>, SynthError> {
    if waypoints.len() < 2 {
        return Err(SynthError::Invalid("need at least two waypoints".into()));
    }
    if frames < 2 {
        return Err(SynthError::Invalid("need at least two frames".into()));
    }
    let n = waypoints.len();
    let at = |i: isize| waypoints[i.clamp(0, n as isize - 1) as usize];
    Ok((0..frames)
        .map(|f| {
            let s = f as f64 / (frames - 1) as f64 * (n - 1) as f64;
            let seg = (s.floor() as isize).min(n as isize - 2);
            let t = s - seg as f64;
            let (a, b, c, d) = (at(seg - 1), at(seg), at(seg + 1), at(seg + 2));
            let pos = catmull_rom(&a.position, &b.position, &c.position, &d.position, t);
            let tgt = catmull_rom(&a.target, &b.target, &c.target, &d.target, t);
            look_at(&pos, &tgt)
        })
        .collect())
}

/// Arc of `arc` radians around `center` at `radius` in the xz-plane, raised
/// by `height` (negative is up), looking at `center`.
pub fn orbit(center: Vector3<f64>, radius: f64, height: f64, arc: f64, frames: usize) -> Vec<PoseSE3<f64>> {
    (0..frames)
        .map(|f| {
            let a = if frames > 1 { -0.5 * arc + arc * f as f64 / (frames - 1) as f64 } else { 0.0 };
            let eye = center + Vector3::new(radius * a.sin(), height, -radius * a.cos());
            look_at(&eye, &center)
        })
        .collect()
}

/// Complete synthetic sequence description.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scene: Scene,
    pub intrinsics: Intrinsics,
    pub poses: Vec<PoseSE3<f64>>,
    pub noise: NoiseModel,
    pub seed: u64,
    pub depth_scale: f64,
    pub frame_rate: f64,
}

impl SynthSpec {
    /// Desk scene observed along a 100-frame orbit at 160×120.
    pub fn desk_orbit(frames: usize) -> Self {
        let k = Intrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap();
        Self {
            scene: Scene::desk(),
            intrinsics: k,
            poses: orbit(Vector3::new(0.0, 0.15, 1.3), 1.2, -0.45, 40f64.to_radians(), frames),
            noise: NoiseModel::default(),
            seed: 0,
            depth_scale: 5000.0,
            frame_rate: 30.0,
        }
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        i as f64 / self.frame_rate
    }

    /// Frame `i`, with noise seeded by `seed + i`.
    pub fn render(&self, i: usize) -> DepthFrame {
        let mut depth = render_depth(&self.scene, &self.poses[i], &self.intrinsics, &TraceParams::default());
        add_noise(&mut depth, &self.noise, self.seed.wrapping_add(i as u64));
        DepthFrame::new(self.intrinsics.width, self.intrinsics.height, depth, self.timestamp(i)).expect("sized buffer")
    }

    /// Parse the line-oriented spec format:
    ///
    /// ```text
    /// # comment
    /// intrinsics fx fy cx cy width height
    /// sphere cx cy cz radius
    /// box cx cy cz hx hy hz [rx ry rz]
    /// plane nx ny nz offset
    /// waypoint px py pz tx ty tz
    /// orbit cx cy cz radius height arc_degrees
    /// frames n
    /// noise a b
    /// seed s
    /// depth_scale s
    /// frame_rate hz
    /// ```
    ///
    /// Either waypoints or an orbit defines the trajectory.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut scene = Scene::default();
        let mut k = None;
        let mut waypoints = Vec::new();
        let mut orbit_spec = None;
        let mut frames = 100usize;
        let mut noise = NoiseModel::default();
        let mut seed = 0u64;
        let mut depth_scale = 5000.0;
        let mut frame_rate = 30.0;
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let err = |msg: String| SynthError::Parse { line, msg };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let key = parts.next().unwrap();
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| err(format!("not a number: {p}"))))
                .collect::<Result<_, _>>()?;
            let want = |n: &[usize]| -> Result<(), SynthError> {
                if n.contains(&nums.len()) {
                    Ok(())
                } else {
                    Err(err(format!("`{key}` takes {n:?} values, got {}", nums.len())))
                }
            };
            let v3 = |o: usize| Vector3::new(nums[o], nums[o + 1], nums[o + 2]);
            match key {
                "intrinsics" => {
                    want(&[6])?;
                    k = Some(
                        Intrinsics::new(nums[0], nums[1], nums[2], nums[3], nums[4] as usize, nums[5] as usize)
                            .map_err(|e| err(e.to_string()))?,
                    );
                }
                "sphere" => {
                    want(&[4])?;
                    if nums[3] <= 0.0 {
                        return Err(err("radius must be positive".into()));
                    }
                    scene.primitives.push(Primitive::Sphere { center: v3(0), radius: nums[3] });
                }
                "box" => {
                    want(&[6, 9])?;
                    let half = v3(3);
                    if half.min() <= 0.0 {
                        return Err(err("half extents must be positive".into()));
                    }
                    let rot = if nums.len() == 9 { Rotation3::new(v3(6)).into_inner() } else { Matrix3::identity() };
                    scene.primitives.push(Primitive::Cuboid { center: v3(0), half, rot });
                }
                "plane" => {
                    want(&[4])?;
                    let n = v3(0);
                    if n.norm() < 1e-12 {
                        return Err(err("plane normal must be nonzero".into()));
                    }
                    scene.primitives.push(Primitive::Plane { normal: n.normalize(), offset: nums[3] / n.norm() });
                }
                "waypoint" => {
                    want(&[6])?;
                    waypoints.push(Waypoint { position: v3(0), target: v3(3) });
                }
                "orbit" => {
                    want(&[6])?;
                    orbit_spec = Some((v3(0), nums[3], nums[4], nums[5].to_radians()));
                }
                "frames" => {
                    want(&[1])?;
                    if nums[0] < 1.0 {
                        return Err(err("frames must be at least 1".into()));
                    }
                    frames = nums[0] as usize;
                }
                "noise" => {
                    want(&[2])?;
                    if nums[0] < 0.0 || nums[1] < 0.0 {
                        return Err(err("noise coefficients must be non-negative".into()));
                    }
                    noise = NoiseModel { a: nums[0], b: nums[1] };
                }
                "seed" => {
                    want(&[1])?;
                    seed = nums[0] as u64;
                }
                "depth_scale" => {
                    want(&[1])?;
                    if nums[0] <= 0.0 {
                        return Err(err("depth_scale must be positive".into()));
                    }
                    depth_scale = nums[0];
                }
                "frame_rate" => {
                    want(&[1])?;
                    if nums[0] <= 0.0 {
                        return Err(err("frame_rate must be positive".into()));
                    }
                    frame_rate = nums[0];
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let intrinsics = k.ok_or_else(|| SynthError::Invalid("missing `intrinsics` line".into()))?;
        if scene.primitives.is_empty() {
            return Err(SynthError::Invalid("scene has no primitives".into()));
        }
        let poses = match (orbit_spec, waypoints.is_empty()) {
            (Some(_), false) => return Err(SynthError::Invalid("use either `orbit` or `waypoint`, not both".into())),
            (Some((c, r, h, arc)), true) => orbit(c, r, h, arc, frames),
            (None, false) => spline_trajectory(&waypoints, frames)?,
            (None, true) => return Err(SynthError::Invalid("missing trajectory (`orbit` or `waypoint`)".into())),
        };
        Ok(Self { scene, intrinsics, poses, noise, seed, depth_scale, frame_rate })
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Sphere { center: c, radius } => write!(f, "sphere {} {} {} {}", c.x, c.y, c.z, radius),
            Primitive::Cuboid { center: c, half: h, rot } => {
                let r = Rotation3::from_matrix(rot).scaled_axis();
                write!(f, "box {} {} {} {} {} {} {} {} {}", c.x, c.y, c.z, h.x, h.y, h.z, r.x, r.y, r.z)
            }
            Primitive::Plane { normal: n, offset } => write!(f, "plane {} {} {} {}", n.x, n.y, n.z, offset),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_center_pixel_depth() {
        let scene = Scene { primitives: vec![Primitive::Sphere { center: Vector3::new(0.0, 0.0, 2.0), radius: 0.5 }] };
        let k = Intrinsics::new(10.0, 10.0, 10.0, 10.0, 21, 21).unwrap();
        let d = render_depth(&scene, &PoseSE3::identity(), &k, &TraceParams::default());
        assert_eq!(d[10 * 21 + 10], 1.5);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn box_and_plane_distances() {
        let b = Primitive::Cuboid { center: Vector3::zeros(), half: Vector3::new(1.0, 2.0, 3.0), rot: Matrix3::identity() };
        assert!((b.sdf(&Vector3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((b.sdf(&Vector3::zeros()) + 1.0).abs() < 1e-12);
        assert!((b.sdf(&Vector3::new(2.0, 3.0, 0.0)) - 2f64.sqrt()).abs() < 1e-12);
        let p = Primitive::Plane { normal: Vector3::z(), offset: 1.0 };
        assert_eq!(p.sdf(&Vector3::new(5.0, 5.0, 3.0)), 2.0);
    }

    #[test]
    fn plane_depth_is_exact_off_axis() {
        let scene = Scene { primitives: vec![Primitive::Plane { normal: Vector3::new(0.0, 0.0, -1.0), offset: -1.7 }] };
        let k = Intrinsics::new(100.0, 100.0, 30.0, 20.0, 61, 41).unwrap();
        let d = render_depth(&scene, &PoseSE3::identity(), &k, &TraceParams::default());
        assert!(d.iter().all(|&z| (z - 1.7).abs() < 1e-8));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut spec = SynthSpec::desk_orbit(3);
        assert_eq!(spec.render(1), spec.render(1));
        spec.noise = NoiseModel { a: 0.001, b: 0.0019 };
        spec.seed = 9;
        assert_eq!(spec.render(2), spec.render(2));
        assert_ne!(spec.render(2).raw, SynthSpec::desk_orbit(3).render(2).raw);
    }

    #[test]
    fn noise_standard_deviation_matches_model() {
        let model = NoiseModel { a: 0.001, b: 0.0019 };
        let d = 2.0;
        let samples: Vec<f64> = (0..1000)
            .map(|s| {
                let mut v = [d];
                add_noise(&mut v, &model, s);
                v[0]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / 1000.0;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let expected = model.sigma(d);
        assert!((std - expected).abs() <= 0.1 * expected, "{std} vs {expected}");
    }

    #[test]
    fn look_at_and_orbit() {
        let pose = look_at(&Vector3::new(0.0, 0.0, -1.0), &Vector3::zeros());
        assert!((pose.rot - Matrix3::identity()).norm() < 1e-12);
        let poses = orbit(Vector3::new(0.0, 0.0, 1.0), 1.0, 0.0, 0.5, 5);
        for p in &poses {
            let forward = p.rot.column(2).into_owned();
            let to_center = (Vector3::new(0.0, 0.0, 1.0) - p.trans).normalize();
            assert!((forward - to_center).norm() < 1e-12);
            assert!((p.orthonormality().1 - 1.0).abs() < 1e-12);
        }
        let desk = SynthSpec::desk_orbit(100);
        let frame = desk.render(50);
        let valid = frame.raw.iter().filter(|&&d| d > 0.0).count();
        assert!(valid > frame.raw.len() * 9 / 10, "{valid}");
    }

    #[test]
    fn spline_passes_through_waypoints() {
        let wps = [
            Waypoint { position: Vector3::new(0.0, 0.0, 0.0), target: Vector3::new(0.0, 0.0, 1.0) },
            Waypoint { position: Vector3::new(0.2, 0.0, 0.0), target: Vector3::new(0.0, 0.0, 1.0) },
            Waypoint { position: Vector3::new(0.4, 0.1, 0.0), target: Vector3::new(0.0, 0.0, 1.0) },
        ];
        let poses = spline_trajectory(&wps, 5).unwrap();
        assert!((poses[0].trans - wps[0].position).norm() < 1e-12);
        assert!((poses[2].trans - wps[1].position).norm() < 1e-12);
        assert!((poses[4].trans - wps[2].position).norm() < 1e-12);
        assert!(spline_trajectory(&wps[..1], 5).is_err());
    }

    #[test]
    fn parse_spec_and_errors() {
        let text = "# desk\nintrinsics 100 100 20 15 40 30\nsphere 0 0 2 0.5\nbox 0 0.3 2 0.1 0.1 0.1 0 0.3 0\nplane 0 0 -1 -3\norbit 0 0 2 1 0 30\nframes 4\nnoise 0.001 0.0019\nseed 3\n";
        let spec = SynthSpec::parse(text).unwrap();
        assert_eq!(spec.poses.len(), 4);
        assert_eq!(spec.scene.primitives.len(), 3);
        assert_eq!(spec.seed, 3);
        let bad = "intrinsics 100 100 20 15 40 30\nsphere 0 0 2\n";
        assert_eq!(SynthSpec::parse(bad), Err(SynthError::Parse { line: 2, msg: "`sphere` takes [4] values, got 3".into() }));
        assert!(matches!(SynthSpec::parse("intrinsics 1 1 0 0 4 4\nsphere 0 0 1 x\n"), Err(SynthError::Parse { line: 2, .. })));
        assert!(matches!(SynthSpec::parse("cube 1\n"), Err(SynthError::Parse { line: 1, .. })));
        assert!(matches!(SynthSpec::parse("sphere 0 0 1 1\n"), Err(SynthError::Invalid(_))));
        // display round trip of primitives
        for p in &spec.scene.primitives {
            let line = format!("intrinsics 1 1 0 0 4 4\n{p}\norbit 0 0 0 1 0 10\nframes 2\n");
            let again = SynthSpec::parse(&line).unwrap();
            let q = &again.scene.primitives[0];
            let probe = Vector3::new(0.3, -0.2, 1.7);
            assert!((p.sdf(&probe) - q.sdf(&probe)).abs() < 1e-9);
        }
    }
}
