use std::process::ExitCode;

use anyhow::{bail, Result};
use cstep_core::diffcheck::{self, DiffcheckConfig, Precision};

use crate::common::write;
use crate::DiffcheckArgs;

pub fn run(a: &DiffcheckArgs) -> Result<ExitCode> {
    let precision = match a.precision.as_str() {
        "f64" => Precision::Double,
        "f32" => Precision::Single,
        p => bail!("--precision: expected f64 or f32, got `{p}`"),
    };
    if a.samples == 0 {
        bail!("--samples must be positive");
    }
    if !(a.h > 0.0) {
        bail!("--h must be positive");
    }
    let report = diffcheck::run(&DiffcheckConfig { samples: a.samples, h: a.h, seed: a.seed, precision });
    println!("{} samples, h = {:e}, {}", report.samples, report.h, precision.name());
    println!("{:<6} {:>12} {:>16} {:>16}", "method", "time [ms]", "max rel error", "mean rel error");
    for (name, s) in [("fd", &report.forward_difference), ("csfd", &report.complex_step)] {
        println!("{:<6} {:>12.3} {:>16.3e} {:>16.3e}", name, s.time.as_secs_f64() * 1e3, s.max_rel_error, s.mean_rel_error);
    }
    if let Some(p) = &a.csv {
        write(p, report.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}
