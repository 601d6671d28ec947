//! TUM-format trajectories (`timestamp tx ty tz qx qy qz qw`) and absolute
//! trajectory error after rigid alignment.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::se3::PoseSE3;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("only {0} poses could be matched by timestamp (need at least 3)")]
    TooFewMatches(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    pub pose: PoseSE3<f64>,
}

/// Parse a TUM trajectory. Comment lines start with `#`. Quaternions within
/// 1e-3 of unit norm are renormalized; timestamps must strictly increase.
pub fn parse_tum(text: &str) -> Result<Vec<Stamped>, TrajectoryError> {
    let mut out: Vec<Stamped> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let err = |msg: String| TrajectoryError::Parse { line, msg };
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|p| p.parse::<f64>().map_err(|_| err(format!("not a number: {p}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(err(format!("quaternion norm {} is not 1", q.norm())));
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(err(format!("timestamp {} does not increase", v[0])));
            }
        }
        let pose = PoseSE3::from_quaternion(Vector3::new(v[1], v[2], v[3]), &UnitQuaternion::from_quaternion(q));
        out.push(Stamped { timestamp: v[0], pose });
    }
    Ok(out)
}

pub fn format_tum(traj: &[Stamped]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in traj {
        let q = e.pose.quaternion();
        let t = e.pose.trans;
        let _ = writeln!(
            s,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

/// Pair each estimated pose with the ground-truth pose nearest in time, within
/// `max_dt` seconds. Each ground-truth pose is used at most once.
pub fn associate(est: &[Stamped], truth: &[Stamped], max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut used = vec![false; truth.len()];
    for (i, e) in est.iter().enumerate() {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, g)| (j, (g.timestamp - e.timestamp).abs()))
            .filter(|(_, dt)| *dt <= max_dt)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rigid transform `(R, t)` minimizing `Σ ‖R·src + t − dst‖²`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> PoseSE3<f64> {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rot = u * fix * vt;
    PoseSE3::new(rot, md - rot * ms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteStats {
    pub rmse: f64,
    pub median: f64,
    pub max: f64,
    pub matched: usize,
}

/// Translational error after rigid alignment of the estimate onto the truth.
pub fn ate(est: &[Stamped], truth: &[Stamped], max_dt: f64) -> Result<AteStats, TrajectoryError> {
    let pairs = associate(est, truth, max_dt);
    if pairs.len() < 3 {
        return Err(TrajectoryError::TooFewMatches(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].pose.trans).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| truth[j].pose.trans).collect();
    let align = align_rigid(&src, &dst);
    let errs: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (align.transform(s) - d).norm()).collect();
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    Ok(AteStats {
        rmse,
        median: crate::util::median(&errs).unwrap_or(0.0),
        max: errs.iter().cloned().fold(0.0, f64::max),
        matched: errs.len(),
    })
}
