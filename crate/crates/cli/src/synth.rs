use std::process::ExitCode;

use anyhow::{Context, Result};
use cstep_core::dataset::write_synthetic;
use cstep_core::synth::{NoiseModel, SynthSpec};

use crate::common::{create_dir, write};
use crate::config::RUN_CONFIG_FILE;
use crate::SynthArgs;

pub fn run(a: &SynthArgs, settings: &str) -> Result<ExitCode> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthSpec::parse(&text).with_context(|| format!("spec {}", p.display()))?
        }
        None => SynthSpec::desk_orbit(a.frames),
    };
    if let Some(v) = a.noise_a {
        spec.noise.a = v;
    }
    if let Some(v) = a.noise_b {
        spec.noise.b = v;
    }
    if a.zero_noise {
        spec.noise = NoiseModel::default();
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    create_dir(&a.out)?;
    write_synthetic(&spec, &a.out)?;
    write(&a.out.join(RUN_CONFIG_FILE), settings)?;
    println!(
        "wrote {} frames ({}x{}, noise a={} b={}, seed {}) to {}",
        spec.poses.len(),
        spec.intrinsics.width,
        spec.intrinsics.height,
        spec.noise.a,
        spec.noise.b,
        spec.seed,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
