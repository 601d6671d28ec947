use nalgebra::Vector3;
use rayon::prelude::*;

use super::TsdfVolume;
use crate::csfd::Scalar;
use crate::frames::{GeometryMaps, Intrinsics};
use crate::se3::PoseSE3;
use crate::util::normalize;

/// Predicted global vertices and normals, one per pixel.
pub type SurfacePrediction<S = f64> = GeometryMaps<S>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaycastParams {
    /// March step along the ray parameter (depth), meters.
    pub delta_alpha: f64,
    pub near: f64,
    pub far: f64,
}

impl RaycastParams {
    /// Step of half the truncation band.
    pub fn for_volume<S: Scalar>(vol: &TsdfVolume<S>) -> Self {
        Self { delta_alpha: 0.5 * vol.config.mu, near: 0.1, far: 8.0 }
    }
}

/// Linear interpolation of the zero crossing between two samples `delta`
/// apart.
#[inline]
pub fn refine_crossing<S: Scalar>(alpha_m: f64, delta: f64, f_m: S, f_next: S) -> S {
    -(f_m * delta) / (f_next - f_m) + alpha_m
}

/// Entry and exit of `o + α d` through the box `[lo, hi]`.
fn clip_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Cast one ray per pixel from `pose` and report the first front-to-back
/// zero crossing of the interpolated field. The march itself runs on real
/// parts; the crossing is re-evaluated in the pose's scalar type so pose
/// perturbations reach the predicted vertices and normals.
///
/// March samples sit at integer multiples of `delta_alpha`, independent of the
/// pose, so the interpolated crossing is a smooth function of the pose between
/// discrete events.
pub fn raycast<S: Scalar>(
    vol: &TsdfVolume<f64>,
    pose: &PoseSE3<S>,
    k: &Intrinsics,
    params: &RaycastParams,
) -> SurfacePrediction<S> {
    let (w, h) = (k.width, k.height);
    let real = pose.real();
    let (lo, hi) = vol.config.center_bounds();
    let da = params.delta_alpha;
    let hits: Vec<Option<(Vector3<S>, Vector3<S>)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray_cam = k.ray((i % w) as f64, (i / w) as f64);
            let d = real.rot * ray_cam;
            let o = real.trans;
            let (entry, exit) = clip_box(&o, &d, &lo, &hi)?;
            let a0 = entry.max(params.near);
            let a1 = exit.min(params.far);
            if a0 >= a1 {
                return None;
            }
            let mut m = (a0 / da).ceil();
            let (mut f_prev, mut obs_prev) = vol.sample(&(o + d * (m * da)));
            while (m + 1.0) * da <= a1 {
                let (f_next, obs_next) = vol.sample(&(o + d * ((m + 1.0) * da)));
                if f_prev > 0.0 && f_next <= 0.0 && obs_prev && obs_next {
                    return crossing(vol, pose, &ray_cam, m * da, da);
                }
                f_prev = f_next;
                obs_prev = obs_next;
                m += 1.0;
            }
            None
        })
        .collect();
    let mut pred = SurfacePrediction::empty(w, h);
    for (i, hit) in hits.into_iter().enumerate() {
        if let Some((v, n)) = hit {
            pred.vertices[i] = v;
            pred.normals[i] = n;
            pred.valid[i] = true;
        }
    }
    pred
}

fn crossing<S: Scalar>(
    vol: &TsdfVolume<f64>,
    pose: &PoseSE3<S>,
    ray_cam: &Vector3<f64>,
    alpha_m: f64,
    da: f64,
) -> Option<(Vector3<S>, Vector3<S>)> {
    let dir = pose.rot * ray_cam.map(S::from);
    let at = |alpha: S| dir * alpha + pose.trans;
    let f_m = vol.sample(&at(S::from(alpha_m))).0;
    let f_n = vol.sample(&at(S::from(alpha_m + da))).0;
    let alpha = refine_crossing(alpha_m, da, f_m, f_n);
    let v = at(alpha);
    let n = normalize(&vol.gradient(&v), 1e-12)?;
    Some((v, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csfd::{ComplexScalar, StepSize};
    use crate::frames::DepthFrame;
    use crate::se3::Twist;
    use crate::tsdf::VolumeConfig;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    #[test]
    fn crossing_interpolation() {
        assert!((refine_crossing(1.0, 0.1, 0.5, -0.5) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn box_clipping() {
        let lo = Vector3::repeat(-1.0);
        let hi = Vector3::repeat(1.0);
        let (a, b) = clip_box(&Vector3::new(0.0, 0.0, -3.0), &Vector3::z(), &lo, &hi).unwrap();
        assert_eq!((a, b), (2.0, 4.0));
        assert!(clip_box(&Vector3::new(2.0, 0.0, -3.0), &Vector3::z(), &lo, &hi).is_none());
    }

    fn sphere_volume(center: Vector3<f64>, radius: f64, cfg: VolumeConfig) -> TsdfVolume<f64> {
        let mut vol = TsdfVolume::<f64>::new(cfg).unwrap();
        for idx in 0..vol.f.len() {
            let [i, j, k] = cfg.coords(idx);
            let sd = (cfg.voxel_center(i, j, k) - center).norm() - radius;
            vol.f[idx] = (sd / cfg.mu).clamp(-1.0, 1.0);
            vol.w[idx] = 1.0;
        }
        vol
    }

    #[test]
    fn analytic_sphere_depth_on_axis() {
        let cfg = VolumeConfig::cube(64, 0.02, Vector3::new(0.0, 0.0, 2.0));
        let vol = sphere_volume(Vector3::new(0.0, 0.0, 2.0), 0.5, cfg);
        let k = Intrinsics::new(60.0, 60.0, 20.0, 15.0, 41, 31).unwrap();
        let pred: SurfacePrediction = raycast(&vol, &PoseSE3::identity(), &k, &RaycastParams::for_volume(&vol));
        let c = pred.index(20, 15);
        assert!(pred.valid[c]);
        assert!((pred.vertices[c].z - 1.5).abs() <= cfg.voxel_size / 2.0, "{}", pred.vertices[c].z);
        assert!((pred.normals[c] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
    }

    #[test]
    fn back_to_front_crossing_is_ignored() {
        // field negative near the camera, positive further away
        let cfg = VolumeConfig::cube(16, 0.05, Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::<f64>::new(cfg).unwrap();
        for idx in 0..vol.f.len() {
            let [i, j, k] = cfg.coords(idx);
            vol.f[idx] = ((cfg.voxel_center(i, j, k).z - 1.0) / cfg.mu).clamp(-1.0, 1.0);
            vol.w[idx] = 1.0;
        }
        let k = Intrinsics::new(20.0, 20.0, 4.5, 4.5, 10, 10).unwrap();
        let pred: SurfacePrediction = raycast(&vol, &PoseSE3::identity(), &k, &RaycastParams::for_volume(&vol));
        assert_eq!(pred.valid_count(), 0);
    }

    #[test]
    fn unobserved_volume_yields_nothing() {
        let cfg = VolumeConfig::cube(16, 0.05, Vector3::new(0.0, 0.0, 1.0));
        let vol = TsdfVolume::<f64>::new(cfg).unwrap();
        let k = Intrinsics::new(20.0, 20.0, 4.5, 4.5, 10, 10).unwrap();
        let pred: SurfacePrediction = raycast(&vol, &PoseSE3::identity(), &k, &RaycastParams::for_volume(&vol));
        assert_eq!(pred.valid_count(), 0);
    }

    fn wavy_frame(k: &Intrinsics) -> DepthFrame {
        let raw = (0..k.width * k.height)
            .map(|i| {
                let (x, y) = ((i % k.width) as f64, (i / k.width) as f64);
                1.1 + 0.1 * (x / 9.0).sin() * (y / 7.0).cos()
            })
            .collect();
        DepthFrame::new(k.width, k.height, raw, 0.0).unwrap()
    }

    #[test]
    fn fused_frame_round_trips() {
        let k = Intrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60).unwrap();
        let frame = wavy_frame(&k);
        let cfg = VolumeConfig::cube(64, 0.02, Vector3::new(0.0, 0.0, 1.1));
        let mut vol = TsdfVolume::<f64>::new(cfg).unwrap();
        vol.integrate(&frame, &k, &PoseSE3::identity());
        let pred: SurfacePrediction = raycast(&vol, &PoseSE3::identity(), &k, &RaycastParams::for_volume(&vol));
        let errs: Vec<f64> = (0..pred.valid.len())
            .filter(|&i| pred.valid[i])
            .map(|i| (pred.vertices[i].z - frame.filtered[i]).abs())
            .collect();
        assert!(errs.len() > frame.filtered.len() / 2);
        let med = crate::util::median(&errs).unwrap();
        assert!(med <= cfg.voxel_size, "median {med}");
    }

    #[test]
    fn predicted_vertex_pose_derivative_matches_central_differences() {
        let k = Intrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60).unwrap();
        let frame = wavy_frame(&k);
        let cfg = VolumeConfig::cube(64, 0.02, Vector3::new(0.0, 0.0, 1.1));
        let mut vol = TsdfVolume::<f64>::new(cfg).unwrap();
        vol.integrate(&frame, &k, &PoseSE3::identity());
        let params = RaycastParams::for_volume(&vol);
        let base = PoseSE3::identity().perturbed(&Twist::new(Vector3::new(0.01, 0.02, 0.0), Vector3::new(0.02, -0.01, 0.01)));
        let h = StepSize::default();
        let eps = 1e-5;
        let reference: SurfacePrediction = raycast(&vol, &base, &k, &params);
        let valid: Vec<usize> = (0..reference.valid.len()).filter(|&i| reference.valid[i]).collect();
        let mut rng = StdRng::seed_from_u64(5);
        let probes: Vec<usize> = (0..50).map(|_| valid[rng.random_range(0..valid.len())]).collect();
        for comp in 0..6 {
            let seeded: SurfacePrediction<ComplexScalar> = raycast(&vol, &base.perturbed(&Twist::zero().seed(comp, h)), &k, &params);
            let mut plus = Twist::zero();
            plus.set(comp, eps);
            let mut minus = Twist::zero();
            minus.set(comp, -eps);
            let vp: SurfacePrediction = raycast(&vol, &base.perturbed(&plus), &k, &params);
            let vm: SurfacePrediction = raycast(&vol, &base.perturbed(&minus), &k, &params);
            for &i in &probes {
                assert!(seeded.valid[i] && vp.valid[i] && vm.valid[i]);
                for c in 0..3 {
                    let fd = (vp.vertices[i][c] - vm.vertices[i][c]) / (2.0 * eps);
                    let cs = seeded.vertices[i][c].im / h.get();
                    assert!((cs - fd).abs() <= 1e-4, "comp {comp} px {i} axis {c}: {cs} vs {fd}");
                }
            }
        }
    }
}
