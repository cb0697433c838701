//! `phantom`: synthetic template/target pairs with known ground truth.

use std::path::PathBuf;

use anyhow::{bail, Result};
use lddmm::io::{write_map, write_volume};
use lddmm::phantom::{
    blob, c_shape, c_shape_landmarks, invert_contrast, translation_velocity, warp_pair, warp_velocity, Structured,
    Swirl,
};
use lddmm::validation::Landmark;
use lddmm::{ImageGrid, ImageVolume, LandmarkSet, TimeVaryingVelocity};
use serde_json::json;

use crate::run::{staged, RunDir};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Rigid shift by `offset` voxels.
    Translate,
    /// Target is `max - template`, no motion.
    InvertContrast,
    /// Rotation about the centre decaying with radius.
    Swirl,
    /// Smooth random deformation from a seeded velocity.
    Warp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Structured,
    Blob,
    CShape,
}

#[derive(Clone, Debug)]
pub struct PhantomJob {
    pub kind: PhantomKind,
    pub shape: Shape,
    pub dims: Vec<usize>,
    /// Isotropic voxel size.
    pub spacing: f64,
    /// Translation in voxels.
    pub offset: Vec<f64>,
    /// Peak swirl angle in radians.
    pub angle: f64,
    /// Swirl width as a fraction of the half extent.
    pub radius: f64,
    /// Largest warp speed in voxels.
    pub amplitude: f64,
    pub bumps: usize,
    pub texture: f64,
    /// Invert the target contrast after the geometric change.
    pub invert: bool,
    pub seed: u64,
    pub time_steps: usize,
    pub out: PathBuf,
}

impl PhantomJob {
    pub fn new(kind: PhantomKind, dims: &[usize], out: PathBuf) -> Self {
        PhantomJob {
            kind,
            shape: Shape::Structured,
            dims: dims.to_vec(),
            spacing: 1.0,
            offset: vec![0.0; dims.len()],
            angle: 0.8,
            radius: 0.5,
            amplitude: 4.0,
            bumps: 4,
            texture: 0.0,
            invert: false,
            seed: 0,
            time_steps: 10,
            out,
        }
    }
}

const C_RADIUS: f64 = 0.5;
const C_THICKNESS: f64 = 0.2;
const C_GAP: f64 = 1.2;

fn template(job: &PhantomJob, grid: &ImageGrid) -> Result<(ImageVolume, LandmarkSet)> {
    Ok(match job.shape {
        Shape::Structured => {
            let s = Structured {
                size: 1.0,
                texture: job.texture,
            };
            (s.render(grid), s.landmarks(grid)?)
        }
        Shape::Blob => {
            let center: Vec<f64> = grid.dims().iter().map(|&d| 0.5 * (d as f64 - 1.0)).collect();
            let sigma = 0.1 * *grid.dims().iter().min().expect("non-empty") as f64;
            let c = grid.center();
            let lm = LandmarkSet::new(
                grid.ndim(),
                vec![Landmark {
                    label: "blob".into(),
                    point: c[..grid.ndim()].to_vec(),
                }],
            )?;
            (blob(grid, &center, sigma), lm)
        }
        Shape::CShape => (
            c_shape(grid, C_RADIUS, C_THICKNESS, C_GAP),
            c_shape_landmarks(grid, C_RADIUS, C_GAP)?,
        ),
    })
}

fn velocity(job: &PhantomJob, grid: &ImageGrid) -> Result<TimeVaryingVelocity> {
    let h = job.spacing;
    match job.kind {
        PhantomKind::Translate => {
            if job.offset.len() != grid.ndim() {
                bail!("--offset needs {} values", grid.ndim());
            }
            let phys: Vec<f64> = job.offset.iter().map(|o| o * h).collect();
            Ok(translation_velocity(grid, &phys, job.time_steps)?)
        }
        PhantomKind::Swirl => Ok(Swirl::new(grid, job.angle, job.radius).velocity(grid, job.time_steps)?),
        PhantomKind::Warp => Ok(warp_velocity(grid, job.amplitude * h, job.bumps, job.seed, job.time_steps)?),
        PhantomKind::InvertContrast => Ok(TimeVaryingVelocity::zeros(grid, job.time_steps)?),
    }
}

pub fn phantom(job: &PhantomJob) -> Result<PathBuf> {
    let run = RunDir::create(&job.out)?;
    staged(run, |run| {
        run.stage("generate")?;
        let n = job.dims.len();
        if !(2..=3).contains(&n) {
            bail!("--size takes 2 or 3 dimensions");
        }
        let grid = ImageGrid::new(&job.dims, &vec![job.spacing; n], &vec![0.0; n])?;
        let (img, lm) = template(job, &grid)?;
        let v = velocity(job, &grid)?;
        let pair = warp_pair(img, &v, lm)?;
        let invert = job.invert || job.kind == PhantomKind::InvertContrast;
        let target = if invert {
            invert_contrast(&pair.target)
        } else {
            pair.target.clone()
        };

        run.stage("write")?;
        let paths = write_volume(&run.path("template"), &pair.template)?;
        run.record("template", &paths);
        let paths = write_volume(&run.path("target"), &target)?;
        run.record("target", &paths);
        let p = run.path("template_landmarks.csv");
        pair.template_landmarks.write(&p)?;
        run.record("template_landmarks", &[p]);
        let p = run.path("target_landmarks.csv");
        pair.target_landmarks.write(&p)?;
        run.record("target_landmarks", &[p]);
        let paths = write_map(&run.path("image_map"), &pair.image_map)?;
        run.record("image_map", &paths);
        let paths = write_map(&run.path("point_map"), &pair.point_map)?;
        run.record("point_map", &paths);
        Ok(json!({
            "command": "phantom",
            "status": "complete",
            "versions": { "lddmm-cli": env!("CARGO_PKG_VERSION"), "lddmm-core": lddmm::VERSION },
            "kind": job.kind,
            "shape": job.shape,
            "dims": job.dims,
            "spacing": job.spacing,
            "offset_voxels": job.offset,
            "angle": job.angle,
            "radius": job.radius,
            "amplitude_voxels": job.amplitude,
            "bumps": job.bumps,
            "texture": job.texture,
            "invert": invert,
            "seed": job.seed,
            "time_steps": job.time_steps,
        }))
    })
}
