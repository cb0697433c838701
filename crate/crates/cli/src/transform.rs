//! `transform`: carry a volume or a landmark file through a computed
//! transform.
//!
//! Volumes are pulled back: `out(x) = in(A^-1(phi(x)))` on the grid of the
//! image map `phi`. Landmarks are pushed forward: `p -> phi_01(A(p))`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lddmm::affine::{apply_affine, apply_affine_nearest};
use lddmm::flow::{deform_image, deform_image_nearest};
use lddmm::io::{read_map, read_volume, write_volume};
use lddmm::validation::{transform_landmarks, MapDirection};
use lddmm::{AffineTransform, DeformationMap, ImageGrid, ImageVolume, LandmarkSet};

use crate::register::names;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Interpolation {
    /// For label images: never invents values.
    Nearest,
    Linear,
}

#[derive(Clone, Debug, Default)]
pub struct TransformJob {
    pub input: PathBuf,
    pub out: PathBuf,
    /// A registration output directory supplying all three parts below.
    pub run: Option<PathBuf>,
    pub image_map: Option<PathBuf>,
    pub point_map: Option<PathBuf>,
    pub affine: Option<PathBuf>,
    /// Output grid for affine-only volume transforms; defaults to the input's.
    pub reference: Option<PathBuf>,
    pub interpolation: Option<Interpolation>,
}

fn describe(grid: &ImageGrid) -> String {
    let dims: Vec<String> = grid.dims().iter().map(|d| d.to_string()).collect();
    format!("{} (spacing {:?})", dims.join("x"), grid.spacing())
}

fn is_landmark_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

struct Parts {
    affine: Option<AffineTransform>,
    image_map: Option<DeformationMap>,
    point_map: Option<DeformationMap>,
}

fn load_parts(job: &TransformJob) -> Result<Parts> {
    let from_run = |name: &str| job.run.as_ref().map(|r| r.join(name));
    let affine_path = job.affine.clone().or_else(|| from_run(names::AFFINE));
    let image_path = job.image_map.clone().or_else(|| from_run(names::IMAGE_MAP));
    let point_path = job.point_map.clone().or_else(|| from_run(names::POINT_MAP));
    let affine = match affine_path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading affine {}", p.display()))?;
            Some(AffineTransform::from_json(&text).with_context(|| format!("parsing affine {}", p.display()))?)
        }
        None => None,
    };
    let read = |p: Option<PathBuf>, what: &str| -> Result<Option<DeformationMap>> {
        p.map(|p| read_map(&p).with_context(|| format!("reading {what} {}", p.display())))
            .transpose()
    };
    let parts = Parts {
        affine,
        image_map: read(image_path, "image map")?,
        point_map: read(point_path, "point map")?,
    };
    if parts.affine.is_none() && parts.image_map.is_none() && parts.point_map.is_none() {
        bail!("no transform given: pass --run, --image-map, --point-map or --affine");
    }
    Ok(parts)
}

pub fn transform(job: &TransformJob) -> Result<Vec<PathBuf>> {
    let parts = load_parts(job)?;
    if is_landmark_file(&job.input) {
        transform_points(job, &parts)
    } else {
        transform_volume(job, &parts)
    }
}

fn transform_points(job: &TransformJob, parts: &Parts) -> Result<Vec<PathBuf>> {
    let lm = LandmarkSet::read(&job.input).with_context(|| format!("reading landmarks {}", job.input.display()))?;
    let mut moved = match &parts.affine {
        Some(a) => {
            if a.ndim() != lm.ndim() {
                bail!("{}D landmarks vs {}D affine", lm.ndim(), a.ndim());
            }
            lm.map_points(|p| a.apply_point(p))?
        }
        None => lm,
    };
    let deformable = match (&parts.point_map, &parts.image_map) {
        (Some(m), _) => Some((m, MapDirection::PointMap)),
        (None, Some(m)) => Some((m, MapDirection::ImageMap)),
        (None, None) => None,
    };
    if let Some((map, dir)) = deformable {
        if map.grid().ndim() != moved.ndim() {
            bail!("{}D landmarks vs map grid {}", moved.ndim(), describe(map.grid()));
        }
        let out = transform_landmarks(&moved, map, dir)?;
        if !out.outside.is_empty() {
            log::warn!("landmarks outside the map extent: {}", out.outside.join(", "));
        }
        moved = out.landmarks;
    }
    moved.write(&job.out)?;
    Ok(vec![job.out.clone()])
}

fn transform_volume(job: &TransformJob, parts: &Parts) -> Result<Vec<PathBuf>> {
    let input: ImageVolume =
        read_volume(&job.input).with_context(|| format!("reading volume {}", job.input.display()))?;
    let interp = job.interpolation.unwrap_or(Interpolation::Nearest);
    let n = input.grid().ndim();
    if parts.image_map.is_none() && parts.point_map.is_some() && parts.affine.is_none() {
        bail!("volumes are pulled back and need an image map; only a point map was given");
    }
    if let Some(m) = &parts.image_map {
        if m.grid().ndim() != n {
            bail!(
                "volume grid {} is incompatible with image map grid {}",
                describe(input.grid()),
                describe(m.grid())
            );
        }
    }
    let identity = AffineTransform::identity(n);
    let affine = parts.affine.as_ref().unwrap_or(&identity);
    if affine.ndim() != n {
        bail!("volume grid {} vs {}D affine", describe(input.grid()), affine.ndim());
    }
    // Affine first, onto the grid the map lives on (or the reference grid).
    let grid = match (&parts.image_map, &job.reference) {
        (Some(m), _) => m.grid().clone(),
        (None, Some(r)) => read_volume::<f64>(r)
            .with_context(|| format!("reading reference {}", r.display()))?
            .grid()
            .clone(),
        (None, None) => input.grid().clone(),
    };
    let out = match &parts.image_map {
        Some(m) => {
            // A^-1(phi(x)) as a single map keeps one interpolation.
            let inv = affine.inverse()?;
            let composed = DeformationMap::from_fn(&grid, |p| inv.apply(&m.apply(p)));
            match interp {
                Interpolation::Nearest => deform_image_nearest(&input, &composed),
                Interpolation::Linear => deform_image(&input, &composed),
            }
        }
        None => match interp {
            Interpolation::Nearest => apply_affine_nearest(&input, affine, &grid)?,
            Interpolation::Linear => apply_affine(&input, affine, &grid)?,
        },
    };
    write_volume(&job.out, &out).map_err(|e| anyhow!("writing {}: {e}", job.out.display()))
}
