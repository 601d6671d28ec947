//! TUM RGB-D style datasets on disk: 16-bit depth PNGs, `associations.txt`,
//! `groundtruth.txt` and a one-line camera file
//! (`fx fy cx cy width height depth_scale`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::frames::{DepthFrame, Intrinsics};
use crate::synth::SynthSpec;
use crate::trajectory::{format_tum, parse_tum, Stamped, TrajectoryError};

pub const CAMERA_FILE: &str = "camera.txt";
pub const ASSOCIATIONS_FILE: &str = "associations.txt";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Png { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Trajectory { path: PathBuf, source: TrajectoryError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Camera intrinsics plus the PNG depth scale (raw units per meter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub intrinsics: Intrinsics,
    pub depth_scale: f64,
}

impl CameraConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, DatasetError> {
        let perr = |line: usize, msg: String| DatasetError::Parse { path: path.to_path_buf(), line, msg };
        let (ln, body) = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| perr(1, "empty camera file".into()))?;
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|p| p.parse::<f64>().map_err(|_| perr(ln, format!("not a number: {p}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 7 {
            return Err(perr(ln, format!("expected `fx fy cx cy width height depth_scale`, got {} values", v.len())));
        }
        let intrinsics =
            Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| perr(ln, e.to_string()))?;
        if v[6] <= 0.0 {
            return Err(perr(ln, "depth_scale must be positive".into()));
        }
        Ok(Self { intrinsics, depth_scale: v[6] })
    }

    pub fn format(&self) -> String {
        let k = &self.intrinsics;
        format!(
            "# fx fy cx cy width height depth_scale\n{} {} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height, self.depth_scale
        )
    }
}

/// Write meters as 16-bit grayscale; 0 stays 0 (invalid), values are rounded
/// and saturated to `u16`.
pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[f64], scale: f64) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| DatasetError::Png { path: path.to_path_buf(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        let raw = if d > 0.0 { (d * scale).round().clamp(1.0, u16::MAX as f64) as u16 } else { 0 };
        bytes.extend_from_slice(&raw.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Read a 16-bit grayscale depth PNG into meters.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<(usize, usize, Vec<f64>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let png_err = |msg: String| DatasetError::Png { path: path.to_path_buf(), msg };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(png_err(format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = buf[..w * h * 2]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
        .collect();
    Ok((w, h, depth))
}

/// One depth image of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEntry {
    pub timestamp: f64,
    pub path: PathBuf,
}

/// Parse `associations.txt`: either `timestamp depth_path` or the four-field
/// `rgb_ts rgb_path depth_ts depth_path` layout.
pub fn parse_associations(text: &str, root: &Path, path: &Path) -> Result<Vec<DepthEntry>, DatasetError> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = body.split_whitespace().collect();
        let (ts, file) = match f.len() {
            2 => (f[0], f[1]),
            4 => (f[2], f[3]),
            n => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: ln + 1,
                    msg: format!("expected 2 or 4 fields, got {n}"),
                })
            }
        };
        let timestamp = ts.parse::<f64>().map_err(|_| DatasetError::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg: format!("bad timestamp {ts}"),
        })?;
        out.push(DepthEntry { timestamp, path: root.join(file) });
    }
    Ok(out)
}

/// Dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera: CameraConfig,
    pub entries: Vec<DepthEntry>,
}

impl Dataset {
    /// Open `root`, taking the camera from `camera` when given, else from
    /// `root/camera.txt`.
    pub fn open(root: &Path, camera: Option<CameraConfig>) -> Result<Self, DatasetError> {
        let camera = match camera {
            Some(c) => c,
            None => {
                let p = root.join(CAMERA_FILE);
                CameraConfig::parse(&fs::read_to_string(&p).map_err(io_err(&p))?, &p)?
            }
        };
        let ap = root.join(ASSOCIATIONS_FILE);
        let entries = parse_associations(&fs::read_to_string(&ap).map_err(io_err(&ap))?, root, &ap)?;
        Ok(Self { root: root.to_path_buf(), camera, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<DepthFrame, DatasetError> {
        let e = &self.entries[i];
        let (w, h, depth) = read_depth_png(&e.path, self.camera.depth_scale)?;
        let k = &self.camera.intrinsics;
        if (w, h) != (k.width, k.height) {
            return Err(DatasetError::Png {
                path: e.path.clone(),
                msg: format!("image is {w}x{h}, camera says {}x{}", k.width, k.height),
            });
        }
        Ok(DepthFrame::new(w, h, depth, e.timestamp).expect("sized buffer"))
    }

    pub fn groundtruth(&self) -> Result<Vec<Stamped>, DatasetError> {
        read_trajectory(&self.root.join(GROUNDTRUTH_FILE))
    }
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Stamped>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_tum(&text).map_err(|source| DatasetError::Trajectory { path: path.to_path_buf(), source })
}

pub fn write_trajectory(path: &Path, traj: &[Stamped]) -> Result<(), DatasetError> {
    fs::write(path, format_tum(traj)).map_err(io_err(path))
}

/// Render every frame of `spec` into `root` as a dataset.
pub fn write_synthetic(spec: &SynthSpec, root: &Path) -> Result<(), DatasetError> {
    let depth_dir = root.join("depth");
    fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    let camera = CameraConfig { intrinsics: spec.intrinsics, depth_scale: spec.depth_scale };
    let cp = root.join(CAMERA_FILE);
    fs::write(&cp, camera.format()).map_err(io_err(&cp))?;
    let mut assoc = String::from("# timestamp depth_path\n");
    let mut truth = Vec::with_capacity(spec.poses.len());
    for i in 0..spec.poses.len() {
        let frame = spec.render(i);
        let name = format!("depth/{:.6}.png", frame.timestamp);
        write_depth_png(&root.join(&name), frame.width, frame.height, &frame.raw, spec.depth_scale)?;
        assoc.push_str(&format!("{:.6} {}\n", frame.timestamp, name));
        truth.push(Stamped { timestamp: frame.timestamp, pose: spec.poses[i] });
    }
    let ap = root.join(ASSOCIATIONS_FILE);
    fs::write(&ap, assoc).map_err(io_err(&ap))?;
    write_trajectory(&root.join(GROUNDTRUTH_FILE), &truth)
}
