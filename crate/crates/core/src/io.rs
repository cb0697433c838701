//! On-disk volume format.
//!
//! A volume is a JSON header `<stem>.json`
//!
//! ```json
//! {"dims":[nx,ny],"spacing":[hx,hy],"origin":[ox,oy],"dtype":"f32","order":"x-fastest"}
//! ```
//!
//! next to `<stem>.raw`, little-endian `f32` samples in x-fastest order.
//! Vector fields add `"components": N` and interleave the components per
//! voxel (`v0.x v0.y v1.x v1.y ...`). Deformation maps are stored as their
//! displacement field in physical units.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DeformationMap, ImageGrid, ImageVolume, VectorField};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
}

impl VolumeHeader {
    pub fn from_grid<T: Real>(grid: &ImageGrid<T>, components: Option<usize>) -> Self {
        VolumeHeader {
            dims: grid.dims().to_vec(),
            spacing: grid.spacing().iter().map(|v| v.to_f64_lossy()).collect(),
            origin: grid.origin().iter().map(|v| v.to_f64_lossy()).collect(),
            dtype: "f32".into(),
            order: "x-fastest".into(),
            components,
        }
    }

    pub fn grid<T: Real>(&self) -> Result<ImageGrid<T>> {
        if self.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.order != "x-fastest" {
            return Err(Error::Format(format!("unsupported order {:?}", self.order)));
        }
        let spacing: Vec<T> = self.spacing.iter().map(|&v| T::lit(v)).collect();
        let origin: Vec<T> = self.origin.iter().map(|&v| T::lit(v)).collect();
        ImageGrid::new(&self.dims, &spacing, &origin)
    }
}

/// Header and raw paths for a volume path given with or without extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn write_raw<T: Real>(path: &Path, values: impl Iterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_raw<T: Real>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect())
}

fn write_header(path: &Path, header: &VolumeHeader) -> Result<()> {
    fs::write(path, serde_json::to_string(header)?)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (hdr, _) = volume_paths(path);
    Ok(serde_json::from_str(&fs::read_to_string(hdr)?)?)
}

/// Writes `<stem>.json` and `<stem>.raw`; returns both paths.
pub fn write_volume<T: Real>(path: &Path, img: &ImageVolume<T>) -> Result<Vec<PathBuf>> {
    let (hdr, raw) = volume_paths(path);
    write_header(&hdr, &VolumeHeader::from_grid(img.grid(), None))?;
    write_raw(&raw, img.data().iter().copied())?;
    Ok(vec![hdr, raw])
}

pub fn read_volume<T: Real>(path: &Path) -> Result<ImageVolume<T>> {
    let header = read_header(path)?;
    if header.components.is_some_and(|c| c != 1) {
        return Err(Error::Format("expected a scalar volume, found a vector field".into()));
    }
    let grid = header.grid::<T>()?;
    let (_, raw) = volume_paths(path);
    let data = read_raw(&raw, grid.len())?;
    ImageVolume::new(grid, data)
}

pub fn write_vector_field<T: Real>(path: &Path, field: &VectorField<T>) -> Result<Vec<PathBuf>> {
    let (hdr, raw) = volume_paths(path);
    let n = field.ndim();
    write_header(&hdr, &VolumeHeader::from_grid(field.grid(), Some(n)))?;
    let len = field.grid().len();
    write_raw(
        &raw,
        (0..len * n).map(|i| field.component(i % n)[i / n]),
    )?;
    Ok(vec![hdr, raw])
}

pub fn read_vector_field<T: Real>(path: &Path) -> Result<VectorField<T>> {
    let header = read_header(path)?;
    let grid = header.grid::<T>()?;
    let n = grid.ndim();
    if header.components != Some(n) {
        return Err(Error::Format(format!(
            "expected {n} components, header says {:?}",
            header.components
        )));
    }
    let (_, raw) = volume_paths(path);
    let flat = read_raw::<T>(&raw, grid.len() * n)?;
    let comps = (0..n)
        .map(|c| flat.iter().skip(c).step_by(n).copied().collect())
        .collect();
    VectorField::new(grid, comps)
}

pub fn write_map<T: Real>(path: &Path, map: &DeformationMap<T>) -> Result<Vec<PathBuf>> {
    write_vector_field(path, map.displacement())
}

pub fn read_map<T: Real>(path: &Path) -> Result<DeformationMap<T>> {
    Ok(DeformationMap::from_displacement(read_vector_field(path)?))
}

/// 8-bit binary PGM of a 2D image (or the middle z-slice of a 3D one),
/// linearly scaled from [min, max] to [0, 255].
pub fn write_pgm<T: Real>(path: &Path, img: &ImageVolume<T>) -> Result<()> {
    let g = img.grid();
    let d = g.dims3();
    let z = d[2] / 2;
    let (lo, hi) = (img.min(), img.max());
    let scale = if hi > lo { T::lit(255.0) / (hi - lo) } else { T::zero() };
    let mut out = format!("P5\n{} {}\n255\n", d[0], d[1]).into_bytes();
    for j in 0..d[1] {
        for i in 0..d[0] {
            let v = (img.get([i, j, z]) - lo) * scale;
            out.push(v.round().to_f64_lossy().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}
