//! Argument parsing and dataset helpers shared by the subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cstep_core::dataset::{CameraConfig, Dataset, CAMERA_FILE};
use cstep_core::frames::Intrinsics;
use cstep_core::optim::{trace_csv, TraceRow};
use cstep_core::tsdf::VolumeConfig;
use nalgebra::Vector3;

use crate::{CameraArgs, VolumeArgs};

pub fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("{what}: `{p}` is not a number")))
        .collect()
}

pub fn parse_vec3(s: &str, what: &str) -> Result<Vector3<f64>> {
    let v = parse_list(s, what)?;
    if v.len() != 3 {
        bail!("{what}: expected `x,y,z`, got {} values", v.len());
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

pub fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("{what}: `{p}` is not a count")))
        .collect()
}

/// Camera from the flags when both are given, else from the dataset's camera
/// file.
pub fn camera(args: &CameraArgs, root: &Path) -> Result<CameraConfig> {
    match (&args.intrinsics, args.depth_scale) {
        (Some(k), Some(depth_scale)) => {
            let v = parse_list(k, "--intrinsics")?;
            if v.len() != 6 {
                bail!("--intrinsics: expected `fx,fy,cx,cy,width,height`, got {} values", v.len());
            }
            let intrinsics = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)?;
            if !(depth_scale > 0.0) {
                bail!("--depth-scale must be positive");
            }
            Ok(CameraConfig { intrinsics, depth_scale })
        }
        (None, None) => {
            let p = root.join(CAMERA_FILE);
            if !p.exists() {
                bail!("{} not found; pass --intrinsics and --depth-scale", p.display());
            }
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CameraConfig::parse(&text, &p)?)
        }
        _ => bail!("--intrinsics and --depth-scale must be given together"),
    }
}

pub fn open_dataset(root: &Path, cam: &CameraArgs) -> Result<Dataset> {
    let camera = camera(cam, root)?;
    Dataset::open(root, Some(camera)).with_context(|| format!("opening dataset {}", root.display()))
}

pub fn volume(args: &VolumeArgs) -> Result<VolumeConfig> {
    if !(args.voxel_size > 0.0) {
        bail!("--voxel-size must be positive");
    }
    let cfg = VolumeConfig::cube(args.volume_dim, args.voxel_size, parse_vec3(&args.volume_center, "--volume-center")?);
    cfg.validate()?;
    Ok(cfg)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write(path, trace_csv(rows))
}

pub fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn median(values: &[f64]) -> Option<f64> {
    cstep_core::util::median(values)
}
