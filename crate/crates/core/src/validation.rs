//! Landmark errors, checkerboard composites and deformation-grid renderings.
//!
//! Direction convention: a registration deforms the template by pullback,
//! `I(1)(x) = I_0(phi_10(x))`, so `phi_10` is the *image map*. A template
//! landmark `p` lands at `phi_01(p)` in target space; `phi_01` is the
//! *point map*. [`transform_landmarks`] takes the map together with its
//! [`MapDirection`] and inverts image maps numerically.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::invert_point;
use crate::grid::{DeformationMap, ImageGrid, ImageVolume, Point};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark<T> {
    pub label: String,
    /// Physical coordinates, one per axis.
    pub point: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T> {
    ndim: usize,
    points: Vec<Landmark<T>>,
}

impl<T: Real> LandmarkSet<T> {
    pub fn new(ndim: usize, points: Vec<Landmark<T>>) -> Result<Self> {
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidParameter(format!("landmarks need 2 or 3 axes, got {ndim}")));
        }
        let mut seen = HashSet::new();
        for lm in &points {
            if lm.point.len() != ndim {
                return Err(Error::InvalidData(format!(
                    "landmark {:?} has {} coordinates, expected {ndim}",
                    lm.label,
                    lm.point.len()
                )));
            }
            if lm.point.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("landmark {:?} is not finite", lm.label)));
            }
            if !seen.insert(lm.label.as_str()) {
                return Err(Error::InvalidData(format!("duplicate landmark label {:?}", lm.label)));
            }
        }
        Ok(LandmarkSet { ndim, points })
    }

    pub fn from_points(labels: &[&str], points: &[Vec<T>]) -> Result<Self> {
        let ndim = points.first().map_or(2, |p| p.len());
        Self::new(
            ndim,
            labels
                .iter()
                .zip(points)
                .map(|(l, p)| Landmark {
                    label: l.to_string(),
                    point: p.clone(),
                })
                .collect(),
        )
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn points(&self) -> &[Landmark<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Landmark<T>> {
        self.points.iter().find(|l| l.label == label)
    }

    /// CSV with header `label,x,y[,z]`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        let names: Vec<&str> = header.iter().collect();
        let ndim = match names.as_slice() {
            ["label", "x", "y"] => 2,
            ["label", "x", "y", "z"] => 3,
            _ => {
                return Err(Error::Format(format!(
                    "landmark header must be label,x,y[,z], got {}",
                    names.join(",")
                )))
            }
        };
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let label = rec[0].to_string();
            let point = (1..=ndim)
                .map(|k| {
                    rec[k]
                        .parse::<f64>()
                        .map(T::lit)
                        .map_err(|e| Error::Format(format!("landmark {label:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()?;
            points.push(Landmark { label, point });
        }
        Self::new(ndim, points)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let axes = ["x", "y", "z"];
        let mut header = vec!["label"];
        header.extend(&axes[..self.ndim]);
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&header).map_err(err)?;
        for lm in &self.points {
            let mut rec = vec![lm.label.clone()];
            rec.extend(lm.point.iter().map(|v| format!("{}", v.to_f64_lossy())));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_csv(std::fs::File::create(path)?)
    }

    pub fn map_points<F: Fn(&[T]) -> Vec<T>>(&self, f: F) -> Result<Self> {
        Self::new(
            self.ndim,
            self.points
                .iter()
                .map(|lm| Landmark {
                    label: lm.label.clone(),
                    point: f(&lm.point),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapDirection {
    /// Moves points: `p -> phi(p)`.
    PointMap,
    /// Resamples images, `output(x) = I(phi(x))`; points move by `phi^-1`.
    ImageMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformedLandmarks<T> {
    pub landmarks: LandmarkSet<T>,
    /// Labels whose input point lay outside the map extent. Their output is
    /// computed with clamped displacements and should not be trusted.
    pub outside: Vec<String>,
}

fn inside<T: Real>(grid: &ImageGrid<T>, p: &[T]) -> bool {
    (0..grid.ndim()).all(|a| {
        let tol = grid.spacing()[a] * T::lit(1e-6);
        let lo = grid.origin()[a];
        let hi = lo + grid.spacing()[a] * T::from_usize_lossy(grid.dims()[a] - 1);
        p[a] >= lo - tol && p[a] <= hi + tol
    })
}

fn to_point<T: Real>(p: &[T]) -> Point<T> {
    let mut q = [T::zero(); 3];
    q[..p.len()].copy_from_slice(p);
    q
}

pub fn transform_landmarks<T: Real>(
    lm: &LandmarkSet<T>,
    map: &DeformationMap<T>,
    direction: MapDirection,
) -> Result<TransformedLandmarks<T>> {
    let grid = map.grid();
    if grid.ndim() != lm.ndim() {
        return Err(Error::GridMismatch(format!(
            "{}D landmarks vs {}D map",
            lm.ndim(),
            grid.ndim()
        )));
    }
    let n = lm.ndim();
    let mut outside = Vec::new();
    let mut points = Vec::with_capacity(lm.len());
    for l in lm.points() {
        if !inside(grid, &l.point) {
            log::warn!("landmark {:?} lies outside the map extent", l.label);
            outside.push(l.label.clone());
        }
        let p = to_point(&l.point);
        let q = match direction {
            MapDirection::PointMap => map.apply(&p),
            MapDirection::ImageMap => invert_point(map, &p),
        };
        points.push(Landmark {
            label: l.label.clone(),
            point: q[..n].to_vec(),
        });
    }
    Ok(TransformedLandmarks {
        landmarks: LandmarkSet::new(n, points)?,
        outside,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkError<T> {
    /// Over the included labels; zero when none are left.
    pub mean: T,
    /// Distances in the label order of the first set.
    pub per_label: Vec<(String, T)>,
    pub excluded: Vec<String>,
}

pub fn landmark_error<T: Real>(a: &LandmarkSet<T>, b: &LandmarkSet<T>) -> Result<LandmarkError<T>> {
    landmark_error_excluding(a, b, &[])
}

/// Like [`landmark_error`]; labels in `exclude` are left out of the mean.
pub fn landmark_error_excluding<T: Real>(
    a: &LandmarkSet<T>,
    b: &LandmarkSet<T>,
    exclude: &[String],
) -> Result<LandmarkError<T>> {
    if a.ndim() != b.ndim() || a.len() != b.len() {
        return Err(Error::LabelMismatch("landmark sets differ in size or dimension".into()));
    }
    let mut per_label = Vec::with_capacity(a.len());
    let mut sum = T::zero();
    let mut count = 0usize;
    for la in a.points() {
        let lb = b
            .get(&la.label)
            .ok_or_else(|| Error::LabelMismatch(format!("label {:?} missing from second set", la.label)))?;
        let d = la
            .point
            .iter()
            .zip(&lb.point)
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum::<T>()
            .sqrt();
        if !exclude.contains(&la.label) {
            sum += d;
            count += 1;
        }
        per_label.push((la.label.clone(), d));
    }
    let mean = if count > 0 { sum / T::from_usize_lossy(count) } else { T::zero() };
    Ok(LandmarkError {
        mean,
        per_label,
        excluded: exclude.to_vec(),
    })
}

/// Tiles of `a` where `sum_axes floor(index / tile)` is even, `b` elsewhere.
pub fn checkerboard<T: Real>(a: &ImageVolume<T>, b: &ImageVolume<T>, tile: usize) -> Result<ImageVolume<T>> {
    a.grid().ensure_matches(b.grid(), "checkerboard")?;
    if tile < 1 {
        return Err(Error::InvalidParameter("checkerboard tile must be at least 1".into()));
    }
    let grid = a.grid();
    let data = (0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            let parity: usize = (0..grid.ndim()).map(|k| c[k] / tile).sum();
            if parity.is_multiple_of(2) {
                a.data()[idx]
            } else {
                b.data()[idx]
            }
        })
        .collect();
    ImageVolume::new(grid.clone(), data)
}

/// Binary image of every `stride`-th coordinate line pushed through `map`
/// (`1` on a line, `0` elsewhere). Lines are traced at quarter-voxel steps
/// and each sample marks its nearest voxel.
pub fn deformation_grid_image<T: Real>(map: &DeformationMap<T>, stride: usize) -> Result<ImageVolume<T>> {
    if stride < 2 {
        return Err(Error::InvalidParameter("deformation grid stride must be at least 2".into()));
    }
    let grid = map.grid();
    let n = grid.ndim();
    let dims = grid.dims3();
    let mut data = vec![T::zero(); grid.len()];
    let sub = 4usize;
    for axis in 0..n {
        let others: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
        let count = |a: usize| (dims[a] - 1) / stride + 1;
        let lines = others.iter().map(|&a| count(a)).product::<usize>();
        for line in 0..lines {
            let mut ijk = [0usize; 3];
            let mut rest = line;
            for &a in &others {
                ijk[a] = (rest % count(a)) * stride;
                rest /= count(a);
            }
            for s in 0..=(dims[axis] - 1) * sub {
                let mut p = grid.point(ijk);
                p[axis] = grid.origin()[axis] + grid.spacing()[axis] * T::from_usize_lossy(s) / T::from_usize_lossy(sub);
                let q = map.apply(&p);
                if inside(grid, &q[..n]) {
                    data[grid.nearest_index(&q)] = T::one();
                }
            }
        }
    }
    ImageVolume::new(grid.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VectorField;

    fn set(points: &[[f64; 2]]) -> LandmarkSet<f64> {
        let labels: Vec<String> = (0..points.len()).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        LandmarkSet::from_points(&refs, &points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn csv_round_trip_and_header() {
        let lm = set(&[[1.5, 2.0], [-3.25, 4.0]]);
        let mut buf = Vec::new();
        lm.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,x,y\n"));
        assert_eq!(LandmarkSet::<f64>::from_csv(buf.as_slice()).unwrap(), lm);
        assert!(LandmarkSet::<f64>::from_csv("name,x,y\na,1,2\n".as_bytes()).is_err());
        assert!(LandmarkSet::<f64>::from_csv("label,x,y\na,1,2\na,3,4\n".as_bytes()).is_err());
    }

    #[test]
    fn offset_error_and_mismatch() {
        let a = set(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let b = set(&[[3.0, 4.0], [1.0, 1.0], [2.0, 2.0]]);
        let e = landmark_error(&a, &b).unwrap();
        assert_eq!(e.per_label[0].1, 5.0);
        assert!((e.mean - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(landmark_error(&a, &a).unwrap().mean, 0.0);
        let c = set(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(landmark_error(&a, &c), Err(Error::LabelMismatch(_))));
        let e = landmark_error_excluding(&a, &b, &["p0".to_string()]).unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn identity_and_translation_maps() {
        let g = ImageGrid::<f64>::with_dims(&[10, 10]).unwrap();
        let lm = set(&[[2.3, 4.1], [7.0, 1.5]]);
        let id = DeformationMap::identity(&g);
        for dir in [MapDirection::PointMap, MapDirection::ImageMap] {
            let out = transform_landmarks(&lm, &id, dir).unwrap();
            assert_eq!(out.landmarks, lm);
            assert!(out.outside.is_empty());
        }
        let shift = DeformationMap::from_displacement(VectorField::from_fn(&g, |_| [1.0, -0.5, 0.0]));
        let fwd = transform_landmarks(&lm, &shift, MapDirection::PointMap).unwrap();
        let back = transform_landmarks(&lm, &shift, MapDirection::ImageMap).unwrap();
        for k in 0..2 {
            let p = &lm.points()[k].point;
            assert_eq!(fwd.landmarks.points()[k].point, vec![p[0] + 1.0, p[1] - 0.5]);
            let q = &back.landmarks.points()[k].point;
            assert!((q[0] - (p[0] - 1.0)).abs() < 1e-12 && (q[1] - (p[1] + 0.5)).abs() < 1e-12);
        }
        let far = set(&[[20.0, 1.0]]);
        assert_eq!(transform_landmarks(&far, &id, MapDirection::PointMap).unwrap().outside, vec!["p0"]);
    }

    #[test]
    fn checkerboard_cases() {
        let g = ImageGrid::<f64>::with_dims(&[6, 1 + 1]).unwrap();
        let zeros = ImageVolume::zeros(&g);
        let ones = ImageVolume::filled(&g, 1.0);
        let cb = checkerboard(&zeros, &ones, 1).unwrap();
        for i in 0..6 {
            assert_eq!(cb.get([i, 0, 0]), (i % 2) as f64);
            assert_eq!(cb.get([i, 1, 0]), ((i + 1) % 2) as f64);
        }
        assert_eq!(checkerboard(&zeros, &ones, 6).unwrap(), zeros);
        assert!(checkerboard(&zeros, &ones, 0).is_err());
        let h = ImageGrid::<f64>::with_dims(&[5, 2]).unwrap();
        assert!(checkerboard(&zeros, &ImageVolume::zeros(&h), 2).is_err());
    }

    #[test]
    fn identity_grid_image() {
        let g = ImageGrid::<f64>::with_dims(&[9, 9]).unwrap();
        let img = deformation_grid_image(&DeformationMap::identity(&g), 4).unwrap();
        for j in 0..9 {
            for i in 0..9 {
                let on = i % 4 == 0 || j % 4 == 0;
                assert_eq!(img.get([i, j, 0]), if on { 1.0 } else { 0.0 }, "{i} {j}");
            }
        }
        assert!(deformation_grid_image(&DeformationMap::identity(&g), 1).is_err());
    }
}
