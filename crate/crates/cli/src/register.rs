//! `register`: optional binarize, affine alignment, deformable schedule.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use lddmm::affine::{affine_register_with, apply_affine, AffineOptions, AffineTraceEntry};
use lddmm::flow::deform_image;
use lddmm::io::{read_volume, write_map, write_volume};
use lddmm::lddmm::trace_csv;
use lddmm::matching::binarize;
use lddmm::multires::run_schedule;
use lddmm::validation::{transform_landmarks, MapDirection};
use lddmm::{AffineTransform, ImageVolume, LandmarkSet};
use serde_json::{json, Value};

use crate::config::JobConfig;
use crate::run::{staged, RunDir};

/// File names inside a registration output directory.
pub mod names {
    pub const DEFORMED: &str = "deformed_template";
    /// `phi_10`: pullback on the target grid, `I(1) = I_0' o phi_10`.
    pub const IMAGE_MAP: &str = "image_map";
    /// `phi_01`: carries aligned template points into target space.
    pub const POINT_MAP: &str = "point_map";
    pub const AFFINE: &str = "affine.json";
    pub const AFFINE_TRACE: &str = "affine_trace.csv";
    pub const TRACE: &str = "energy_trace.csv";
    pub const NORMALIZED: &str = "normalized_matching.csv";
    pub const LANDMARKS: &str = "landmarks_in_target.csv";
}

#[derive(Clone, Debug)]
pub struct RegisterJob {
    pub template: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    pub config: JobConfig,
    /// Template landmarks to carry into target space.
    pub landmarks: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

fn load(path: &Path, what: &str) -> Result<ImageVolume> {
    read_volume(path).with_context(|| format!("reading {what} {}", path.display()))
}

pub fn normalized_csv(trace: &[lddmm::lddmm::TraceEntry<f64>]) -> String {
    let mut s = String::from("level,iteration,normalized_M\n");
    for e in trace {
        let v = match e.normalized_matching {
            Some(n) => format!("{n:e}"),
            None => "degenerate".to_string(),
        };
        s.push_str(&format!("{},{},{}\n", e.level, e.iteration, v));
    }
    s
}

/// `level,iteration,M,accepted`; `M` is negative MI.
pub fn affine_csv(trace: &[AffineTraceEntry<f64>]) -> String {
    let mut s = String::from("level,iteration,M,accepted\n");
    for e in trace {
        s.push_str(&format!("{},{},{:e},{}\n", e.level, e.iteration, e.value, e.accepted));
    }
    s
}

/// Template points through the affine and then `phi_01`.
pub fn carry_landmarks(
    lm: &LandmarkSet,
    affine: &AffineTransform,
    point_map: &lddmm::DeformationMap,
) -> Result<(LandmarkSet, Vec<String>)> {
    let moved = lm.map_points(|p| affine.apply_point(p))?;
    let out = transform_landmarks(&moved, point_map, MapDirection::PointMap)?;
    Ok((out.landmarks, out.outside))
}

pub fn register(job: &RegisterJob) -> Result<PathBuf> {
    let run = RunDir::create(&job.out)?;
    staged(run, |run| body(job, run))
}

fn body(job: &RegisterJob, run: &mut RunDir) -> Result<Value> {
    let start = Instant::now();
    run.stage("load")?;
    let template = load(&job.template, "template")?;
    let target = load(&job.target, "target")?;
    let landmarks = match &job.landmarks {
        Some(p) => Some(LandmarkSet::read(p).with_context(|| format!("reading landmarks {}", p.display()))?),
        None => None,
    };

    run.stage("config")?;
    let cfg = job.config.registration()?;
    let schedule = job.config.schedule_for(target.grid());
    schedule.validate(target.grid().ndim())?;
    let thresholds = job.config.thresholds()?;

    run.stage("mask")?;
    let (i0, j1) = match thresholds {
        Some((tt, tj)) => (binarize(&template, tt)?, binarize(&target, tj)?),
        None => (template.clone(), target.clone()),
    };

    run.stage("affine")?;
    let affine_start = Instant::now();
    let (affine, affine_trace) = if job.config.affine.enabled {
        let opts = AffineOptions::new(job.config.affine.bins, job.config.affine.max_iterations);
        let r = affine_register_with(&i0, &j1, &opts)?;
        (r.transform, r.trace)
    } else {
        (AffineTransform::identity(target.grid().ndim()), Vec::new())
    };
    let affine_secs = affine_start.elapsed().as_secs_f64();
    let aligned = apply_affine(&i0, &affine, target.grid())?;

    run.stage("lddmm")?;
    let sched = run_schedule(&aligned, &j1, &schedule, &cfg)?;
    let res = &sched.result;

    run.stage("write")?;
    let deformed = if thresholds.is_some() {
        deform_image(&apply_affine(&template, &affine, target.grid())?, &res.forward_map)
    } else {
        res.deformed_template.clone()
    };
    let paths = write_volume(&run.path(names::DEFORMED), &deformed)?;
    run.record("deformed_template", &paths);
    let paths = write_map(&run.path(names::IMAGE_MAP), &res.forward_map)?;
    run.record("image_map", &paths);
    let paths = write_map(&run.path(names::POINT_MAP), &res.inverse_map)?;
    run.record("point_map", &paths);
    run.write_text("affine", names::AFFINE, &(affine.to_json()? + "\n"))?;
    if !affine_trace.is_empty() {
        run.write_text("affine_trace", names::AFFINE_TRACE, &affine_csv(&affine_trace))?;
    }
    run.write_text("energy_trace", names::TRACE, &trace_csv(&res.trace))?;
    run.write_text("normalized_matching", names::NORMALIZED, &normalized_csv(&res.trace))?;
    let mut outside = Vec::new();
    if let Some(lm) = &landmarks {
        let (moved, out) = carry_landmarks(lm, &affine, &res.inverse_map)?;
        outside = out;
        let path = run.path(names::LANDMARKS);
        moved.write(&path)?;
        run.record("landmarks_in_target", &[path]);
    }

    let last = res.final_entry();
    let mut resolved = job.config.clone();
    resolved.schedule = Some(schedule.clone());
    let levels: Vec<Value> = sched
        .levels
        .iter()
        .map(|l| {
            json!({
                "level": l.level,
                "dims": l.dims,
                "spacing": l.spacing,
                "alpha": l.alpha,
                "iterations": l.iterations,
                "initial_matching": l.initial_matching,
                "reference_matching": l.reference_matching,
            })
        })
        .collect();
    let level_secs: Vec<f64> = sched.levels.iter().map(|l| l.wall_time_secs).collect();
    Ok(json!({
        "command": "register",
        "status": "complete",
        "versions": { "lddmm-cli": env!("CARGO_PKG_VERSION"), "lddmm-core": lddmm::VERSION },
        "inputs": {
            "template": job.template,
            "target": job.target,
            "landmarks": job.landmarks,
        },
        "config": resolved,
        "threads": job.threads,
        "seed": job.seed,
        "levels": levels,
        "summary": {
            "energy": last.energy,
            "regularization": last.regularization,
            "matching": last.matching,
            "normalized_matching": last.normalized_matching,
            "degenerate": last.normalized_matching.is_none(),
            "trace_entries": res.trace.len(),
            "landmarks_outside": outside,
        },
        "timing": {
            "affine_secs": affine_secs,
            "level_secs": level_secs,
            "total_secs": start.elapsed().as_secs_f64(),
        },
    }))
}
