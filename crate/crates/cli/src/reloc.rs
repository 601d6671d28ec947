use std::fmt::Write as _;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cstep_core::csfd::StepSize;
use cstep_core::dataset::{read_trajectory, write_trajectory};
use cstep_core::frames::DepthFrame;
use cstep_core::optim::{pose_errors, Eta, OptimConfig};
use cstep_core::reloc::{eval_nn_error, frame_cloud, relocalize_query, RelocConfig, RelocMethod};
use cstep_core::se3::PoseSE3;
use cstep_core::trajectory::Stamped;
use nalgebra::{Rotation3, Unit, Vector3};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::common::{create_dir, median, open_dataset, volume, write, write_trace};
use crate::config::RUN_CONFIG_FILE;
use crate::RelocArgs;

/// Pixel stride of the clouds used for the nearest-neighbor error.
const CLOUD_STRIDE: usize = 7;

fn parse_eta(s: &str) -> Result<Eta> {
    let (kind, v) = s.split_once(':').context("--eta: expected `relative:r` or `absolute:v`")?;
    let v: f64 = v.trim().parse().with_context(|| format!("--eta: `{v}` is not a number"))?;
    match kind.trim() {
        "relative" => Ok(Eta::Relative(v)),
        "absolute" => Ok(Eta::Absolute(v)),
        k => bail!("--eta: unknown kind `{k}`"),
    }
}

fn random_unit(rng: &mut StdRng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

/// `pose` rotated by `deg` about a random axis through the camera center and
/// moved `dist` meters in a random direction.
pub fn perturb(pose: &PoseSE3<f64>, deg: f64, dist: f64, rng: &mut StdRng) -> PoseSE3<f64> {
    let r = Rotation3::from_axis_angle(&random_unit(rng), deg.to_radians());
    PoseSE3::new(r.matrix() * pose.rot, pose.trans + random_unit(rng).into_inner() * dist)
}

fn nearest_frame(timestamps: &[f64], t: f64) -> Option<usize> {
    timestamps
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .filter(|(_, s)| (*s - t).abs() <= 0.02)
        .map(|(i, _)| i)
}

pub fn run(a: &RelocArgs, settings: &str) -> Result<ExitCode> {
    let ds = open_dataset(&a.dataset, &a.camera)?;
    let k = ds.camera.intrinsics;
    let vol = volume(&a.volume)?;
    let methods: Vec<RelocMethod> = match a.method.as_str() {
        "both" => vec![RelocMethod::Gd, RelocMethod::Newton],
        m => vec![m.parse().map_err(anyhow::Error::msg)?],
    };
    let cfg = RelocConfig {
        eta: parse_eta(&a.eta)?,
        optim: OptimConfig { max_iters: a.max_iters, h: StepSize::new(a.h)?, ..OptimConfig::default() },
    };
    if a.neighbors == 0 {
        bail!("--neighbors must be at least 1");
    }

    let timestamps: Vec<f64> = ds.entries.iter().map(|e| e.timestamp).collect();
    let gt = ds.groundtruth()?;
    let mut poses = Vec::with_capacity(ds.len());
    for (i, t) in timestamps.iter().enumerate() {
        let g = gt
            .iter()
            .find(|g| (g.timestamp - t).abs() <= 0.02)
            .with_context(|| format!("frame {i} ({t:.6}) has no ground-truth pose"))?;
        poses.push(g.pose);
    }
    let frames: Vec<DepthFrame> = (0..ds.len()).map(|i| ds.frame(i)).collect::<Result<_, _>>()?;

    // (frame index, initial pose)
    let queries: Vec<(usize, PoseSE3<f64>)> = match &a.init {
        Some(p) => {
            let init = read_trajectory(p)?;
            init.iter()
                .map(|s| {
                    nearest_frame(&timestamps, s.timestamp)
                        .map(|i| (i, s.pose))
                        .with_context(|| format!("{}: no frame at timestamp {:.6}", p.display(), s.timestamp))
                })
                .collect::<Result<_>>()?
        }
        None => {
            if a.queries == 0 || ds.len() < 2 {
                bail!("need at least one query and two frames");
            }
            let mut rng = StdRng::seed_from_u64(a.seed);
            let n = a.queries.min(ds.len());
            (0..n)
                .map(|q| {
                    let i = if n == 1 { 0 } else { q * (ds.len() - 1) / (n - 1) };
                    (i, perturb(&poses[i], a.perturb_rot, a.perturb_trans, &mut rng))
                })
                .collect()
        }
    };

    create_dir(&a.out)?;
    write(&a.out.join(RUN_CONFIG_FILE), settings)?;
    let traces = a.out.join("traces");
    create_dir(&traces)?;
    let mut csv = String::from("query,frame,timestamp,method,trans_err,rot_err_deg,nn_error,outlier,iterations,loss\n");
    let mut out_traj: Vec<Vec<Stamped>> = vec![Vec::new(); methods.len() + 1];
    // per column (init, methods…): errors of non-outlier queries
    let mut kept: Vec<Vec<(f64, f64)>> = vec![Vec::new(); methods.len() + 1];
    let mut outliers = 0;
    let mut fewer_iters = 0;
    let mut compared = 0;

    for (q, (fi, init)) in queries.iter().enumerate() {
        let ts = timestamps[*fi];
        let truth = poses[*fi];
        let query_cloud = frame_cloud(&frames[*fi], &k, CLOUD_STRIDE);
        let outcome = relocalize_query(&frames, &poses, *fi, init, &k, vol, a.neighbors, &methods, &cfg);
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("query {q} (frame {fi}): {e}; reported as outlier");
                outliers += 1;
                let _ = writeln!(csv, "{q},{fi},{ts:.6},init,nan,nan,nan,true,0,nan");
                continue;
            }
        };
        let reference: Vec<Vector3<f64>> = outcome
            .neighbors
            .iter()
            .flat_map(|&i| {
                let pose = poses[i];
                frame_cloud(&frames[i], &k, CLOUD_STRIDE).into_iter().map(move |p| pose.transform(&p))
            })
            .collect();
        let mut rows = Vec::new();
        let mut outlier = false;
        let (nn0, out0) = eval_nn_error(init, &query_cloud, &reference).unwrap_or((f64::NAN, true));
        outlier |= out0;
        let (t0, r0) = pose_errors(init, &truth);
        rows.push(("init".to_string(), *init, t0, r0, nn0, 0usize, f64::NAN));
        for r in &outcome.results {
            let pose = r.result.pose;
            let (nn, out) = eval_nn_error(&pose, &query_cloud, &reference).unwrap_or((f64::NAN, true));
            outlier |= out;
            let (t, rot) = pose_errors(&pose, &truth);
            rows.push((r.method.name().to_string(), pose, t, rot, nn, r.result.iterations, r.result.loss));
            write_trace(&traces.join(format!("query_{q:03}_{}.csv", r.method.name())), &r.result.trace)?;
        }
        if let [gd, newton] = &outcome.results[..] {
            compared += 1;
            if newton.result.iterations < gd.result.iterations {
                fewer_iters += 1;
            }
        }
        if outlier {
            outliers += 1;
        }
        for (col, (name, pose, t, rot, nn, it, loss)) in rows.into_iter().enumerate() {
            let _ = writeln!(csv, "{q},{fi},{ts:.6},{name},{t:e},{rot:e},{nn:e},{outlier},{it},{loss:e}");
            out_traj[col].push(Stamped { timestamp: ts, pose });
            if !outlier {
                kept[col].push((t, rot));
            }
        }
    }

    write(&a.out.join("errors.csv"), csv)?;
    let names: Vec<&str> = std::iter::once("init").chain(methods.iter().map(|m| m.name())).collect();
    for (col, name) in names.iter().enumerate() {
        let mut traj = out_traj[col].clone();
        traj.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp));
        traj.dedup_by(|x, y| x.timestamp == y.timestamp);
        write_trajectory(&a.out.join(format!("{name}.txt")), &traj)?;
    }
    println!("{} queries, {} outliers", queries.len(), outliers);
    println!("{:<8} {:>16} {:>18}", "method", "median trans [m]", "median rot [deg]");
    for (col, name) in names.iter().enumerate() {
        let t: Vec<f64> = kept[col].iter().map(|e| e.0).collect();
        let r: Vec<f64> = kept[col].iter().map(|e| e.1).collect();
        println!("{:<8} {:>16.6} {:>18.4}", name, median(&t).unwrap_or(f64::NAN), median(&r).unwrap_or(f64::NAN));
    }
    if compared > 0 {
        println!("newton used fewer iterations than gd in {fewer_iters}/{compared} queries");
    }
    Ok(ExitCode::SUCCESS)
}
