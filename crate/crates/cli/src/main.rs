//! `cstep`: synthetic data, tracking, relocalization, evaluation and plotting
//! for the complex-step differentiable reconstruction pipeline.

mod chain;
mod common;
mod config;
mod diffcheck;
mod evaluate;
mod plot;
mod reloc;
mod synth;
mod track;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Complex-step differentiable dense RGB-D reconstruction toolkit.
///
/// Every subcommand accepts `--config FILE`, a flat `key = value` file whose
/// keys are the subcommand's long flag names; flags given on the command line
/// override the file. Runs that write an output directory record their full
/// settings there as `run.cfg`.
#[derive(Debug, Parser)]
#[command(name = "cstep", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Compare complex-step and forward-difference derivatives of a test
    /// function: accuracy and wall time.
    Diffcheck(DiffcheckArgs),
    /// Render a synthetic depth dataset with ground-truth poses.
    Synth(SynthArgs),
    /// Track a depth sequence and reconstruct it.
    Track(TrackArgs),
    /// Refine initial query poses against a reference reconstruction.
    Reloc(RelocArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    Evaluate(EvaluateArgs),
    /// Draw optimizer traces as SVG curves.
    Plot(PlotArgs),
    /// Chain a score's point gradients through the surfel map to the pose.
    Chain(ChainArgs),
}

#[derive(Debug, Args)]
pub struct DiffcheckArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of random evaluation points in [0, 1].
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    /// Step size for both methods.
    #[arg(long, default_value_t = 1e-8)]
    pub h: f64,
    /// Seed of the sample generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Arithmetic precision: f64 or f32.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// Write the report as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene and trajectory spec file; without it the built-in desk orbit is
    /// rendered.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Frames of the built-in desk orbit.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Constant term of the depth noise σ(d) = a + b·d², meters.
    #[arg(long)]
    pub noise_a: Option<f64>,
    /// Quadratic term of the depth noise, 1/meters.
    #[arg(long)]
    pub noise_b: Option<f64>,
    /// Render without noise regardless of the spec.
    #[arg(long)]
    pub zero_noise: bool,
    /// Noise seed; frame i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Camera model; required unless the dataset has a camera file.
#[derive(Debug, Args)]
pub struct CameraArgs {
    /// Pinhole intrinsics `fx,fy,cx,cy,width,height` (pixels).
    #[arg(long)]
    pub intrinsics: Option<String>,
    /// Raw depth PNG units per meter.
    #[arg(long)]
    pub depth_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VolumeArgs {
    /// Voxels per side of the cubic volume.
    #[arg(long, default_value_t = 128)]
    pub volume_dim: usize,
    /// Voxel edge length, meters.
    #[arg(long)]
    pub voxel_size: f64,
    /// Volume center `x,y,z`, meters, in the world frame.
    #[arg(long, allow_hyphen_values = true)]
    pub volume_center: String,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (associations.txt, depth PNGs).
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Map representation: tsdf or surfel.
    #[arg(long, default_value = "tsdf")]
    pub backend: String,
    /// Pose optimizer: linearized, gd, ncg or newton.
    #[arg(long, default_value = "newton")]
    pub optimizer: String,
    /// Iterations per pyramid level, coarsest first.
    #[arg(long, default_value = "10,5,4")]
    pub level_iters: String,
    /// Largest correspondence distance, meters.
    #[arg(long, default_value_t = 0.1)]
    pub max_distance: f64,
    /// Largest correspondence normal angle, degrees.
    #[arg(long, default_value_t = 30.0)]
    pub max_normal_angle: f64,
    /// Complex-step size.
    #[arg(long, default_value_t = 1e-8)]
    pub h: f64,
    /// Use every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub frame_step: usize,
    /// Stop after this many dataset frames.
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Skip the bilateral filter before measurement.
    #[arg(long)]
    pub no_filter: bool,
    /// Start at the identity instead of the first ground-truth pose.
    #[arg(long)]
    pub init_identity: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelocArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference dataset with ground-truth poses.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[command(flatten)]
    pub volume: VolumeArgs,
    /// Initial query poses (TUM format), matched to dataset frames by
    /// timestamp. Without it, perturbed ground-truth poses are generated.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of generated queries, spread evenly over the sequence.
    #[arg(long, default_value_t = 30)]
    pub queries: usize,
    /// Rotation of generated perturbations, degrees.
    #[arg(long, default_value_t = 3.0)]
    pub perturb_rot: f64,
    /// Translation of generated perturbations, meters.
    #[arg(long, default_value_t = 0.05)]
    pub perturb_trans: f64,
    /// Seed of the perturbation axes and directions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reference frames fused per query.
    #[arg(long, default_value_t = 10)]
    pub neighbors: usize,
    /// gd, newton or both.
    #[arg(long, default_value = "both")]
    pub method: String,
    /// Newton switch threshold: `relative:r` (fraction of the initial loss)
    /// or `absolute:v`.
    #[arg(long, default_value = "relative:0.5")]
    pub eta: String,
    /// Iteration cap per query and method.
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    /// Complex-step size.
    #[arg(long, default_value_t = 1e-8)]
    pub h: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    pub estimated: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    pub truth: PathBuf,
    /// Largest timestamp difference of a matched pair, seconds.
    #[arg(long, default_value_t = 0.02)]
    pub max_dt: f64,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace CSVs as `METHOD=PATH`, or plain paths named after the method.
    #[arg(required = true)]
    pub traces: Vec<String>,
    /// Output SVG file.
    #[arg(long)]
    pub out: PathBuf,
    /// Title above the panels.
    #[arg(long, default_value = "optimizer traces")]
    pub title: String,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset with ground-truth poses.
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Frame fused first, at its ground-truth pose.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    /// Frame fused with the seeded pose.
    #[arg(long, default_value_t = 1)]
    pub second: usize,
    /// Object surfels lie within this radius of the center, meters.
    #[arg(long)]
    pub object_radius: f64,
    /// Object center `x,y,z`, meters.
    #[arg(long, allow_hyphen_values = true)]
    pub object_center: String,
    /// Score: centroid, visibility or external.
    #[arg(long, default_value = "centroid")]
    pub score: String,
    /// Target point `x,y,z` of the centroid score, meters.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub target: String,
    /// Half angle of the visibility cone, degrees; the cone looks from the
    /// second camera toward the object center.
    #[arg(long, default_value_t = 5.0)]
    pub half_angle: f64,
    /// Sharpness of the visibility cone's soft edge.
    #[arg(long, default_value_t = 40.0)]
    pub sharpness: f64,
    /// Command line of an external score process.
    #[arg(long)]
    pub external: Option<String>,
    /// Complex-step size.
    #[arg(long, default_value_t = 1e-8)]
    pub h: f64,
    /// Also report central differences of the re-run update.
    #[arg(long)]
    pub fd_check: bool,
    /// Write the result as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn run(args: Vec<OsString>) -> anyhow::Result<ExitCode> {
    let cmd = Cli::command();
    let args = config::expand(args, &cmd)?;
    let matches = match cmd.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Ok(ExitCode::from(code));
        }
    };
    let cli = Cli::from_arg_matches(&matches)?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let settings = config::effective(cmd.find_subcommand(name).expect("known subcommand"), sub_matches);
    match cli.command {
        Cmd::Diffcheck(a) => diffcheck::run(&a),
        Cmd::Synth(a) => synth::run(&a, &settings),
        Cmd::Track(a) => track::run(&a, &settings),
        Cmd::Reloc(a) => reloc::run(&a, &settings),
        Cmd::Evaluate(a) => evaluate::run(&a),
        Cmd::Plot(a) => plot::run(&a),
        Cmd::Chain(a) => chain::run(&a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
