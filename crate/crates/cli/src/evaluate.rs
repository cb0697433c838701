//! `evaluate`: landmark errors, Jacobian range and the final energy of a
//! finished registration, as a JSON report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lddmm::grid::{interior_indices, jacobian_determinant};
use lddmm::io::{read_map, read_volume, write_pgm, write_volume};
use lddmm::validation::{checkerboard, deformation_grid_image, landmark_error};
use lddmm::{AffineTransform, DeformationMap, ImageVolume, LandmarkSet};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::register::{carry_landmarks, names};
use crate::run::{MANIFEST, PARTIAL};

/// JSON Schema of the report written by `evaluate`.
pub const REPORT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "lddmm evaluation report",
  "type": "object",
  "required": ["run", "landmarks", "jacobian", "final", "normalized_matching", "images"],
  "additionalProperties": false,
  "properties": {
    "run": { "type": "string" },
    "landmarks": {
      "type": ["object", "null"],
      "required": ["mean", "per_label", "outside"],
      "additionalProperties": false,
      "properties": {
        "mean": { "type": "number", "minimum": 0 },
        "per_label": {
          "type": "array",
          "items": {
            "type": "object",
            "required": ["label", "error"],
            "additionalProperties": false,
            "properties": {
              "label": { "type": "string" },
              "error": { "type": "number", "minimum": 0 }
            }
          }
        },
        "outside": { "type": "array", "items": { "type": "string" } }
      }
    },
    "jacobian": {
      "type": "object",
      "required": ["min", "max", "margin"],
      "additionalProperties": false,
      "properties": {
        "min": { "type": "number" },
        "max": { "type": "number" },
        "margin": { "type": "integer", "minimum": 0 }
      }
    },
    "final": {
      "type": "object",
      "required": ["energy", "regularization", "matching"],
      "additionalProperties": false,
      "properties": {
        "energy": { "type": "number" },
        "regularization": { "type": "number" },
        "matching": { "type": "number" }
      }
    },
    "normalized_matching": {
      "type": "object",
      "required": ["value", "degenerate"],
      "additionalProperties": false,
      "properties": {
        "value": { "type": ["number", "null"] },
        "degenerate": { "type": "boolean" }
      }
    },
    "images": {
      "type": "object",
      "required": ["checkerboard", "deformation_grid"],
      "additionalProperties": false,
      "properties": {
        "checkerboard": { "type": ["array", "null"], "items": { "type": "string" } },
        "deformation_grid": { "type": ["array", "null"], "items": { "type": "string" } }
      }
    }
  }
}"#;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelError {
    pub label: String,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub mean: f64,
    pub per_label: Vec<LabelError>,
    /// Labels that left the map extent; still included in the mean.
    pub outside: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub min: f64,
    pub max: f64,
    /// Voxels excluded at each face.
    pub margin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEnergy {
    pub energy: f64,
    pub regularization: f64,
    pub matching: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedReport {
    pub value: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub checkerboard: Option<Vec<String>>,
    pub deformation_grid: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run: String,
    pub landmarks: Option<LandmarkReport>,
    pub jacobian: JacobianReport,
    #[serde(rename = "final")]
    pub final_energy: FinalEnergy,
    pub normalized_matching: NormalizedReport,
    pub images: ImageReport,
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateJob {
    pub run: PathBuf,
    pub out: PathBuf,
    /// Template landmarks, compared after transformation with `target_landmarks`.
    pub landmarks: Option<PathBuf>,
    pub target_landmarks: Option<PathBuf>,
    /// Target image for the checkerboard; defaults to the one in the manifest.
    pub target: Option<PathBuf>,
    pub checkerboard: Option<usize>,
    pub grid_stride: Option<usize>,
}

/// Voxels dropped at each face before taking the Jacobian range.
pub const JACOBIAN_MARGIN: usize = 1;

fn read_manifest(run: &Path) -> Result<Value> {
    if run.join(PARTIAL).exists() {
        bail!("{} holds an incomplete run ({} marker present)", run.display(), PARTIAL);
    }
    let path = run.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("missing run manifest {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn number(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().with_context(|| format!("manifest lacks {what}"))
}

/// Image path plus the `.pgm` preview for 2D images, relative to `dir`.
fn write_image(dir: &Path, stem: &str, img: &ImageVolume) -> Result<Vec<String>> {
    let mut paths = write_volume(&dir.join(stem), img)?;
    if img.grid().ndim() == 2 {
        let pgm = dir.join(format!("{stem}.pgm"));
        write_pgm(&pgm, img)?;
        paths.push(pgm);
    }
    Ok(paths
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect())
}

pub fn evaluate(job: &EvaluateJob) -> Result<Report> {
    let manifest = read_manifest(&job.run)?;
    let image_map: DeformationMap = read_map(&job.run.join(names::IMAGE_MAP))
        .with_context(|| format!("missing image map in {}", job.run.display()))?;
    let point_map: DeformationMap = read_map(&job.run.join(names::POINT_MAP))
        .with_context(|| format!("missing point map in {}", job.run.display()))?;
    let affine_path = job.run.join(names::AFFINE);
    let affine = AffineTransform::from_json(
        &fs::read_to_string(&affine_path).with_context(|| format!("missing {}", affine_path.display()))?,
    )?;

    let landmarks = match (&job.landmarks, &job.target_landmarks) {
        (Some(a), Some(b)) => {
            let template = LandmarkSet::read(a).with_context(|| format!("reading {}", a.display()))?;
            let target = LandmarkSet::read(b).with_context(|| format!("reading {}", b.display()))?;
            let (moved, outside) = carry_landmarks(&template, &affine, &point_map)?;
            let err = landmark_error(&moved, &target)?;
            Some(LandmarkReport {
                mean: err.mean,
                per_label: err
                    .per_label
                    .into_iter()
                    .map(|(label, error)| LabelError { label, error })
                    .collect(),
                outside,
            })
        }
        (None, None) => None,
        _ => bail!("landmark evaluation needs both --landmarks and --target-landmarks"),
    };

    let det = jacobian_determinant(&image_map);
    let inner = interior_indices(image_map.grid(), JACOBIAN_MARGIN);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &inner {
        lo = lo.min(det.data()[i]);
        hi = hi.max(det.data()[i]);
    }
    if inner.is_empty() {
        bail!("image map grid has no interior voxels");
    }

    let summary = &manifest["summary"];
    let final_energy = FinalEnergy {
        energy: number(&summary["energy"], "summary.energy")?,
        regularization: number(&summary["regularization"], "summary.regularization")?,
        matching: number(&summary["matching"], "summary.matching")?,
    };
    let value = summary["normalized_matching"].as_f64();

    let dir = job
        .out
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let checker = match job.checkerboard {
        Some(tile) => {
            let target_path = match &job.target {
                Some(p) => p.clone(),
                None => PathBuf::from(
                    manifest["inputs"]["target"]
                        .as_str()
                        .context("manifest lacks inputs.target")?,
                ),
            };
            let target: ImageVolume =
                read_volume(&target_path).with_context(|| format!("reading target {}", target_path.display()))?;
            let deformed: ImageVolume = read_volume(&job.run.join(names::DEFORMED))
                .with_context(|| format!("missing deformed template in {}", job.run.display()))?;
            Some(write_image(&dir, "checkerboard", &checkerboard(&deformed, &target, tile)?)?)
        }
        None => None,
    };
    let grid_img = match job.grid_stride {
        Some(stride) => Some(write_image(&dir, "deformation_grid", &deformation_grid_image(&image_map, stride)?)?),
        None => None,
    };

    let report = Report {
        run: job.run.display().to_string(),
        landmarks,
        jacobian: JacobianReport {
            min: lo,
            max: hi,
            margin: JACOBIAN_MARGIN,
        },
        final_energy,
        normalized_matching: NormalizedReport {
            value,
            degenerate: value.is_none(),
        },
        images: ImageReport {
            checkerboard: checker,
            deformation_grid: grid_img,
        },
    };
    fs::write(&job.out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing report {}", job.out.display()))?;
    Ok(report)
}
