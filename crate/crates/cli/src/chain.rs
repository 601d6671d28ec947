use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cstep_core::csfd::StepSize;
use cstep_core::frames::{surface_measure, GeometryMaps};
use cstep_core::se3::{PoseSE3, Twist};
use cstep_core::surfel::{fuse_frame, update_surfels, SurfelMap, SurfelParams};
use cstep_core::taskgrad::{
    chain_pose_gradient, seeded_fusion, CentroidDistance, ExternalScore, RegisteredScore, ScoreFunction, VisibilityCone,
};
use nalgebra::{Vector3, Vector6};
use serde_json::json;

use crate::common::{open_dataset, parse_vec3, write};
use crate::ChainArgs;

/// Step of the optional central-difference check.
const FD_STEP: f64 = 1e-6;

pub fn run(a: &ChainArgs) -> Result<ExitCode> {
    let ds = open_dataset(&a.dataset, &a.camera)?;
    let k = ds.camera.intrinsics;
    if a.first >= ds.len() || a.second >= ds.len() || a.first == a.second {
        bail!("--first and --second must be distinct frames below {}", ds.len());
    }
    let gt = ds.groundtruth()?;
    let pose_of = |i: usize| -> Result<PoseSE3<f64>> {
        let t = ds.entries[i].timestamp;
        gt.iter().find(|g| (g.timestamp - t).abs() <= 0.02).map(|g| g.pose).with_context(|| format!("frame {i} has no ground-truth pose"))
    };
    let (p0, p1) = (pose_of(a.first)?, pose_of(a.second)?);
    let params = SurfelParams::default();
    let h = StepSize::new(a.h)?;

    let mut map = SurfelMap::new();
    let m0: GeometryMaps<f64> = surface_measure(&ds.frame(a.first)?, &k);
    fuse_frame(&mut map, &m0, &p0, &k, 0, &params);
    let center = parse_vec3(&a.object_center, "--object-center")?;
    let object: Vec<usize> = map.iter_live().filter(|(_, s)| (s.v - center).norm() <= a.object_radius).map(|(i, _)| i).collect();
    if object.is_empty() {
        bail!("no surfels within {} m of the object center", a.object_radius);
    }
    let probe: Vec<Vector3<f64>> = object.iter().map(|&j| map.surfels[j].v).collect();

    let score: Box<dyn ScoreFunction> = match a.score.as_str() {
        "centroid" => Box::new(CentroidDistance { target: parse_vec3(&a.target, "--target")? }),
        "visibility" => Box::new(VisibilityCone::new(p1.trans, center - p1.trans, a.half_angle.to_radians(), a.sharpness)),
        "external" => {
            let cmd = a.external.as_deref().context("--score external needs --external")?;
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().context("--external is empty")?;
            Box::new(ExternalScore::new(program, parts.collect()))
        }
        s => bail!("--score: expected centroid, visibility or external, got `{s}`"),
    };
    let score = RegisteredScore::register(score, &probe)?;

    let m1: GeometryMaps<f64> = surface_measure(&ds.frame(a.second)?, &k);
    let (passes, assoc) = seeded_fusion(&map, &m1, &p1, &k, 1, &params, h);
    let chained = chain_pose_gradient(&passes, &object, &score)?;

    println!("score `{}` over {} object surfels: {:.9e}", score.descriptor(), object.len(), chained.score);
    println!("dS/dxi (rotation x y z, translation x y z):");
    println!("  chained {}", fmt6(&chained.ds_dxi));
    let mut doc = json!({
        "score": chained.score,
        "descriptor": score.descriptor(),
        "object_surfels": object.len(),
        "ds_dxi": chained.ds_dxi.as_slice(),
    });
    if a.fd_check {
        let at = |i: usize, d: f64| -> Result<f64> {
            let mut xi = Twist::zero();
            xi.set(i, d);
            let mut m = map.clone();
            update_surfels(&mut m, &assoc, &m1, &p1.perturbed(&xi), &k, 1, params.sigma);
            let pts: Vec<Vector3<f64>> = object.iter().map(|&j| m.surfels[j].v).collect();
            Ok(score.evaluate(&pts)?.score)
        };
        let mut fd = Vector6::zeros();
        for i in 0..6 {
            fd[i] = (at(i, FD_STEP)? - at(i, -FD_STEP)?) / (2.0 * FD_STEP);
        }
        let rel = (chained.ds_dxi - fd).amax() / fd.amax().max(f64::MIN_POSITIVE);
        println!("  central {}", fmt6(&fd));
        println!("  relative difference {rel:.3e}");
        doc["fd_ds_dxi"] = json!(fd.as_slice());
        doc["relative_difference"] = json!(rel);
    }
    if let Some(p) = &a.json {
        write(p, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt6(v: &Vector6<f64>) -> String {
    v.iter().map(|x| format!("{x:+.6e}")).collect::<Vec<_>>().join(" ")
}
