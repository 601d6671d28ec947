use std::process::ExitCode;

use anyhow::Result;
use cstep_core::dataset::read_trajectory;
use cstep_core::trajectory::ate;
use serde_json::json;

use crate::common::write;
use crate::EvaluateArgs;

pub fn run(a: &EvaluateArgs) -> Result<ExitCode> {
    let est = read_trajectory(&a.estimated)?;
    let truth = read_trajectory(&a.truth)?;
    let stats = ate(&est, &truth, a.max_dt)?;
    let doc = json!({
        "ate_rmse": stats.rmse,
        "ate_median": stats.median,
        "ate_max": stats.max,
        "matched": stats.matched,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");
    if let Some(p) = &a.json {
        write(p, text + "\n")?;
    }
    if let Some(p) = &a.csv {
        write(p, format!("ate_rmse,ate_median,ate_max,matched\n{:e},{:e},{:e},{}\n", stats.rmse, stats.median, stats.max, stats.matched))?;
    }
    Ok(ExitCode::SUCCESS)
}
