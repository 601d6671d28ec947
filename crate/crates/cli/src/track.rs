use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cstep_core::csfd::StepSize;
use cstep_core::dataset::{write_trajectory, DatasetError, GROUNDTRUTH_FILE};
use cstep_core::icp::{IcpConfig, IcpOptimizer};
use cstep_core::pipeline::{run_sequence, Backend, PipelineConfig, PipelineError};
use cstep_core::se3::PoseSE3;
use cstep_core::surfel::write_ply;
use cstep_core::trajectory::{ate, Stamped};
use cstep_core::tsdf::write_checkpoint;

use crate::common::{create_dir, ms, open_dataset, parse_usize_list, volume, write, write_trace};
use crate::config::RUN_CONFIG_FILE;
use crate::TrackArgs;

/// Exit status when tracking is lost; the partial trajectory is still written.
pub const LOST_EXIT: u8 = 3;

#[derive(Debug)]
enum LoadError {
    Dataset(DatasetError),
    Pipeline(PipelineError),
}

impl From<PipelineError> for LoadError {
    fn from(e: PipelineError) -> Self {
        LoadError::Pipeline(e)
    }
}

/// Ground truth matched to dataset frames by nearest timestamp within 20 ms.
fn truth_per_frame(frames: &[f64], truth: &[Stamped]) -> Vec<Option<PoseSE3<f64>>> {
    frames
        .iter()
        .map(|t| {
            truth
                .iter()
                .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
                .filter(|g| (g.timestamp - t).abs() <= 0.02)
                .map(|g| g.pose)
        })
        .collect()
}

pub fn run(a: &TrackArgs, settings: &str) -> Result<ExitCode> {
    let ds = open_dataset(&a.dataset, &a.camera)?;
    let k = ds.camera.intrinsics;
    let backend: Backend = a.backend.parse().map_err(anyhow::Error::msg)?;
    let optimizer: IcpOptimizer = a.optimizer.parse()?;
    if a.frame_step == 0 {
        bail!("--frame-step must be at least 1");
    }
    let mut icp = IcpConfig { level_iters: parse_usize_list(&a.level_iters, "--level-iters")?, optimizer, ..IcpConfig::default() };
    icp.thresholds.max_distance = a.max_distance;
    icp.thresholds.max_normal_angle = a.max_normal_angle;
    icp.optim.h = StepSize::new(a.h)?;
    icp.validate()?;
    let mut cfg = PipelineConfig::new(volume(&a.volume)?);
    cfg.backend = backend;
    cfg.icp = icp;
    cfg.pyramid.levels = cfg.icp.level_iters.len();
    cfg.frame_step = a.frame_step;
    if a.no_filter {
        cfg.bilateral = None;
    }

    let timestamps: Vec<f64> = ds.entries.iter().map(|e| e.timestamp).collect();
    let gt_path = ds.root.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() { Some(ds.groundtruth()?) } else { None };
    let truth: Option<Vec<Option<PoseSE3<f64>>>> = groundtruth.as_ref().map(|g| truth_per_frame(&timestamps, g));
    let initial = match (&truth, a.init_identity) {
        (Some(t), false) => t.first().copied().flatten().context("no ground-truth pose for the first frame; pass --init-identity")?,
        _ => PoseSE3::identity(),
    };
    // poses for the trace; frames without a match get none
    let truth_poses: Option<Vec<PoseSE3<f64>>> =
        truth.as_ref().and_then(|t| t.iter().copied().collect::<Option<Vec<_>>>());

    let count = a.max_frames.map_or(ds.len(), |m| m.min(ds.len()));
    create_dir(&a.out)?;
    write(&a.out.join(RUN_CONFIG_FILE), settings)?;
    let run = match run_sequence::<_, LoadError>(cfg, k, initial, count, |i| ds.frame(i).map_err(LoadError::Dataset), truth_poses.as_deref()) {
        Ok(r) => r,
        Err(LoadError::Dataset(e)) => return Err(e.into()),
        Err(LoadError::Pipeline(e)) => return Err(e.into()),
    };

    let traj = run.trajectory();
    write_trajectory(&a.out.join("trajectory.txt"), &traj)?;
    let mut timing = String::from("index,timestamp,measure_ms,track_ms,fuse_ms,iterations,loss,diverged\n");
    let traces = a.out.join("traces");
    create_dir(&traces)?;
    for r in &run.records {
        let _ = writeln!(
            timing,
            "{},{:.6},{:.3},{:.3},{:.3},{},{:e},{}",
            r.index,
            r.timestamp,
            ms(r.times.measure),
            ms(r.times.track),
            ms(r.times.fuse),
            r.iterations,
            r.loss,
            r.diverged
        );
        if !r.trace.is_empty() {
            write_trace(&traces.join(format!("frame_{:05}.csv", r.index)), &r.trace)?;
        }
    }
    write(&a.out.join("timing.csv"), timing)?;
    if let Some(vol) = run.tracker.volume() {
        let p = a.out.join("volume.bin");
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        write_checkpoint(vol, BufWriter::new(f))?;
    }
    if let Some(map) = run.tracker.surfels() {
        let p = a.out.join("surfels.ply");
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        write_ply(map, BufWriter::new(f))?;
    }

    let n = run.records.len().max(1) as f64;
    let mean = |f: fn(&cstep_core::pipeline::FrameRecord) -> std::time::Duration| run.records.iter().map(|r| ms(f(r))).sum::<f64>() / n;
    println!(
        "tracked {} frames ({} backend, {} optimizer); mean ms per frame: measure {:.1}, track {:.1}, fuse {:.1}",
        run.records.len(),
        backend.name(),
        optimizer.name(),
        mean(|r| r.times.measure),
        mean(|r| r.times.track),
        mean(|r| r.times.fuse)
    );
    if let Some(g) = &groundtruth {
        if traj.len() >= 3 {
            match ate(&traj, g, 0.02) {
                Ok(s) => println!("ATE RMSE {:.6} m (median {:.6}, max {:.6}, {} poses)", s.rmse, s.median, s.max, s.matched),
                Err(e) => eprintln!("ATE unavailable: {e}"),
            }
        }
    }
    if let Some(e) = run.lost {
        eprintln!("error: {e}; partial trajectory of {} frames written", run.records.len());
        return Ok(ExitCode::from(LOST_EXIT));
    }
    Ok(ExitCode::SUCCESS)
}
