//! Affine pre-alignment under Mattes mutual information.
//!
//! An [`AffineTransform`] `A` maps template points to target points,
//! `A(p) = M p + b`. Images are resampled by pullback, `output(x) = I(A^-1 x)`.
//!
//! The optimiser works on the pullback `B = A^-1` written about a fixed centre
//! `c`, `B(x) = M (x - c) + c + b`, in coordinates normalised by the half
//! extent of the target domain so that every parameter moves a point by a
//! comparable fraction of the domain. Steps follow the normalised gradient
//! with the accept/grow, reject/halve rule of the deformable optimiser.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resample, ImageGrid, ImageVolume, Point};
use crate::lddmm::{GROW, SHRINK};
use crate::matching::MattesMi;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform<T> {
    ndim: usize,
    matrix: [[T; 3]; 3],
    translation: [T; 3],
}

#[derive(Serialize, Deserialize)]
struct AffineJson {
    matrix: Vec<Vec<f64>>,
    translation: Vec<f64>,
    units: String,
}

fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl<T: Real> AffineTransform<T> {
    pub fn identity(ndim: usize) -> Self {
        let mut matrix = [[T::zero(); 3]; 3];
        for (a, row) in matrix.iter_mut().enumerate() {
            row[a] = T::one();
        }
        AffineTransform {
            ndim,
            matrix,
            translation: [T::zero(); 3],
        }
    }

    /// `matrix` is `N x N` row-major, `translation` has `N` entries.
    pub fn new(matrix: &[Vec<T>], translation: &[T]) -> Result<Self> {
        let n = translation.len();
        if !(2..=3).contains(&n) || matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidParameter(
                "affine matrix must be N x N and translation N long, N in {2, 3}".into(),
            ));
        }
        let mut out = Self::identity(n);
        for a in 0..n {
            out.translation[a] = translation[a];
            for b in 0..n {
                out.matrix[a][b] = matrix[a][b];
            }
        }
        if out.matrix.iter().flatten().chain(&out.translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("affine parameters must be finite".into()));
        }
        let d = out.det();
        if d == T::zero() {
            return Err(Error::Singular(d.to_f64_lossy()));
        }
        Ok(out)
    }

    /// Scaling `s` about `center` followed by a translation.
    pub fn scaling_about(center: &[T], scale: &[T], translation: &[T]) -> Result<Self> {
        let n = center.len();
        let mut m = vec![vec![T::zero(); n]; n];
        let mut t = vec![T::zero(); n];
        for a in 0..n {
            m[a][a] = scale[a];
            t[a] = center[a] - scale[a] * center[a] + translation[a];
        }
        Self::new(&m, &t)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn matrix(&self) -> Vec<Vec<T>> {
        (0..self.ndim).map(|a| self.matrix[a][..self.ndim].to_vec()).collect()
    }

    pub fn translation(&self) -> Vec<T> {
        self.translation[..self.ndim].to_vec()
    }

    pub fn det(&self) -> T {
        if self.ndim == 2 {
            self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
        } else {
            det3(&self.matrix)
        }
    }

    pub fn apply(&self, p: &Point<T>) -> Point<T> {
        let mut out = [T::zero(); 3];
        for a in 0..self.ndim {
            out[a] = self.translation[a];
            for b in 0..self.ndim {
                out[a] += self.matrix[a][b] * p[b];
            }
        }
        out
    }

    pub fn apply_point(&self, p: &[T]) -> Vec<T> {
        let mut q = [T::zero(); 3];
        q[..self.ndim].copy_from_slice(&p[..self.ndim]);
        self.apply(&q)[..self.ndim].to_vec()
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d == T::zero() || !d.is_finite() {
            return Err(Error::Singular(d.to_f64_lossy()));
        }
        let m = &self.matrix;
        let mut inv = [[T::zero(); 3]; 3];
        if self.ndim == 2 {
            inv[0][0] = m[1][1] / d;
            inv[0][1] = -m[0][1] / d;
            inv[1][0] = -m[1][0] / d;
            inv[1][1] = m[0][0] / d;
            inv[2][2] = T::one();
        } else {
            for a in 0..3 {
                for b in 0..3 {
                    // cofactor transpose
                    let (r0, r1) = ((b + 1) % 3, (b + 2) % 3);
                    let (c0, c1) = ((a + 1) % 3, (a + 2) % 3);
                    inv[a][b] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
                }
            }
        }
        let mut translation = [T::zero(); 3];
        for a in 0..self.ndim {
            for b in 0..self.ndim {
                translation[a] -= inv[a][b] * self.translation[b];
            }
        }
        Ok(AffineTransform {
            ndim: self.ndim,
            matrix: inv,
            translation,
        })
    }

    /// `(self o inner)(p) = self(inner(p))`.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        if self.ndim != inner.ndim {
            return Err(Error::InvalidParameter("composing affines of different dimension".into()));
        }
        let n = self.ndim;
        let mut out = Self::identity(n);
        for a in 0..n {
            out.translation[a] = self.translation[a];
            for b in 0..n {
                out.translation[a] += self.matrix[a][b] * inner.translation[b];
                out.matrix[a][b] = (0..n).map(|k| self.matrix[a][k] * inner.matrix[k][b]).sum();
            }
        }
        Ok(out)
    }

    /// Largest displacement `|A(x) - x|` over the corners of `grid`.
    pub fn max_displacement(&self, grid: &ImageGrid<T>) -> T {
        let n = grid.ndim();
        let dims = grid.dims();
        let mut worst = T::zero();
        for corner in 0..(1usize << n) {
            let mut ijk = [0usize; 3];
            for a in 0..n {
                ijk[a] = if corner >> a & 1 == 1 { dims[a] - 1 } else { 0 };
            }
            let p = grid.point(ijk);
            let q = self.apply(&p);
            let d: T = (0..n).map(|a| (q[a] - p[a]) * (q[a] - p[a])).sum();
            worst = worst.max(d.sqrt());
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = AffineJson {
            matrix: self
                .matrix()
                .iter()
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            translation: self.translation().iter().map(|v| v.to_f64_lossy()).collect(),
            units: "physical".into(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: AffineJson = serde_json::from_str(text)?;
        if doc.units != "physical" {
            return Err(Error::Format(format!("unsupported affine units {:?}", doc.units)));
        }
        let m: Vec<Vec<T>> = doc.matrix.iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect();
        let t: Vec<T> = doc.translation.iter().map(|&v| T::lit(v)).collect();
        Self::new(&m, &t)
    }
}

/// `output(x) = img(A^-1 x)` on `target`.
pub fn apply_affine<T: Real>(
    img: &ImageVolume<T>,
    transform: &AffineTransform<T>,
    target: &ImageGrid<T>,
) -> Result<ImageVolume<T>> {
    if transform.ndim() != img.grid().ndim() || target.ndim() != img.grid().ndim() {
        return Err(Error::GridMismatch("affine dimension differs from the image".into()));
    }
    let inv = transform.inverse()?;
    Ok(ImageVolume::from_fn(target, |p| img.sample(&inv.apply(p))))
}

/// Like [`apply_affine`] with nearest-neighbour sampling (label images).
pub fn apply_affine_nearest<T: Real>(
    img: &ImageVolume<T>,
    transform: &AffineTransform<T>,
    target: &ImageGrid<T>,
) -> Result<ImageVolume<T>> {
    if transform.ndim() != img.grid().ndim() || target.ndim() != img.grid().ndim() {
        return Err(Error::GridMismatch("affine dimension differs from the image".into()));
    }
    let inv = transform.inverse()?;
    Ok(ImageVolume::from_fn(target, |p| img.sample_nearest(&inv.apply(p))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineOptions<T> {
    pub bins: usize,
    /// Per pyramid level.
    pub max_iterations: usize,
    /// Coarsening factors, coarse to fine. Levels whose grid would have fewer
    /// than 8 voxels along some axis are skipped.
    pub levels: Vec<T>,
    /// Initial step, as a fraction of the half extent.
    pub epsilon0: T,
    /// A level ends once the step falls below this fraction of the half extent.
    pub min_step: T,
}

impl<T: Real> AffineOptions<T> {
    pub fn new(bins: usize, max_iterations: usize) -> Self {
        AffineOptions {
            bins,
            max_iterations,
            levels: vec![T::lit(4.0), T::lit(2.0), T::one()],
            epsilon0: T::lit(0.02),
            min_step: T::lit(1e-4),
        }
    }
}

/// Intensity-weighted centroid, weights `|I - median of boundary voxels|`,
/// so the result does not depend on the sign of the contrast.
pub fn centroid<T: Real>(img: &ImageVolume<T>) -> Result<Point<T>> {
    let grid = img.grid();
    let n = grid.ndim();
    let dims = grid.dims();
    let mut boundary: Vec<T> = (0..grid.len())
        .filter(|&idx| {
            let c = grid.coords(idx);
            (0..n).any(|a| c[a] == 0 || c[a] + 1 == dims[a])
        })
        .map(|idx| img.data()[idx])
        .collect();
    boundary.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let background = boundary[boundary.len() / 2];
    let mut acc = [T::zero(); 3];
    let mut total = T::zero();
    for (idx, &v) in img.data().iter().enumerate() {
        let w = (v - background).abs();
        let p = grid.point_of(idx);
        for a in 0..n {
            acc[a] += w * p[a];
        }
        total += w;
    }
    if !(total > T::zero()) {
        return Err(Error::Degenerate("image is constant; no centroid".into()));
    }
    for a in acc.iter_mut().take(n) {
        *a /= total;
    }
    Ok(acc)
}

/// Pullback `B(x) = (I + S m S^-1)(x - c) + c + S tau` in normalised parameters,
/// `S = diag(half extent)`.
#[derive(Clone, Copy, Debug)]
struct Params<T> {
    m: [[T; 3]; 3],
    tau: [T; 3],
}

struct Frame<T> {
    ndim: usize,
    center: Point<T>,
    half: [T; 3],
}

impl<T: Real> Frame<T> {
    fn linear(&self, p: &Params<T>) -> [[T; 3]; 3] {
        let mut l = [[T::zero(); 3]; 3];
        for a in 0..3 {
            l[a][a] = T::one();
        }
        for a in 0..self.ndim {
            for b in 0..self.ndim {
                l[a][b] += self.half[a] * p.m[a][b] / self.half[b];
            }
        }
        l
    }

    fn pullback(&self, p: &Params<T>) -> AffineTransform<T> {
        let l = self.linear(p);
        let mut translation = [T::zero(); 3];
        for a in 0..self.ndim {
            translation[a] = self.center[a] + self.half[a] * p.tau[a];
            for b in 0..self.ndim {
                translation[a] -= l[a][b] * self.center[b];
            }
        }
        AffineTransform {
            ndim: self.ndim,
            matrix: l,
            translation,
        }
    }
}

struct Level<'a, T: Real> {
    template: &'a ImageVolume<T>,
    target: &'a ImageVolume<T>,
    mi: MattesMi<T>,
    frame: &'a Frame<T>,
}

impl<T: Real> Level<'_, T> {
    fn value(&self, p: &Params<T>) -> Result<T> {
        let b = self.frame.pullback(p);
        let warped = ImageVolume::from_fn(self.target.grid(), |x| self.template.sample(&b.apply(x)));
        Ok(self.mi.evaluate(&warped, self.target)?.value)
    }

    /// Value and gradient with respect to `(m, tau)`.
    fn value_and_gradient(&self, p: &Params<T>) -> Result<(T, Params<T>)> {
        let n = self.frame.ndim;
        let b = self.frame.pullback(p);
        let grid = self.target.grid();
        let points: Vec<Point<T>> = (0..grid.len()).into_par_iter().map(|idx| b.apply(&grid.point_of(idx))).collect();
        let warped_data = points.par_iter().map(|q| self.template.sample(q)).collect();
        let warped = ImageVolume::new(grid.clone(), warped_data)?;
        let res = self.mi.evaluate(&warped, self.target)?;
        let dv = grid.voxel_volume();
        let mut g = Params {
            m: [[T::zero(); 3]; 3],
            tau: [T::zero(); 3],
        };
        for (idx, q) in points.iter().enumerate() {
            let s = res.gradient.data()[idx];
            if s == T::zero() {
                continue;
            }
            let di = self.template.sample_gradient(q);
            let x = grid.point_of(idx);
            for a in 0..n {
                let f = s * di[a] * self.frame.half[a] * dv;
                g.tau[a] += f;
                for bb in 0..n {
                    g.m[a][bb] += f * (x[bb] - self.frame.center[bb]) / self.frame.half[bb];
                }
            }
        }
        Ok((res.value, g))
    }
}

fn norm<T: Real>(p: &Params<T>) -> T {
    p.m.iter().flatten().chain(&p.tau).map(|v| *v * *v).sum::<T>().sqrt()
}

/// Estimate `A` such that `apply_affine(I0, A, J.grid())` matches `J` under
/// Mattes MI with `bins` bins.
pub fn affine_register<T: Real>(
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    bins: usize,
    max_iterations: usize,
) -> Result<AffineTransform<T>> {
    Ok(affine_register_with(template, target, &AffineOptions::new(bins, max_iterations))?.transform)
}

/// One optimiser step. `value` is the MI matching term (negative MI) of the
/// trial parameters; rejected steps that would flip orientation are not
/// evaluated and carry `NaN`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTraceEntry<T> {
    /// Index into [`AffineOptions::levels`].
    pub level: usize,
    pub iteration: usize,
    pub value: T,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct AffineResult<T> {
    pub transform: AffineTransform<T>,
    /// Starts each level with its initial value (marked accepted).
    pub trace: Vec<AffineTraceEntry<T>>,
}

pub fn affine_register_with<T: Real>(
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    opts: &AffineOptions<T>,
) -> Result<AffineResult<T>> {
    let n = target.grid().ndim();
    if template.grid().ndim() != n {
        return Err(Error::GridMismatch("template and target dimension differ".into()));
    }
    if template.min() == template.max() || target.min() == target.max() {
        return Err(Error::Degenerate("affine registration needs non-constant images".into()));
    }
    if opts.max_iterations < 1 || opts.levels.is_empty() {
        return Err(Error::InvalidParameter("affine options need iterations and levels".into()));
    }
    let tgrid = target.grid();
    let extent = tgrid.extent();
    let mut half = [T::one(); 3];
    for a in 0..n {
        half[a] = T::lit(0.5) * extent[a].max(tgrid.spacing()[a]);
    }
    let c_target = centroid(target)?;
    let c_template = centroid(template)?;
    let frame = Frame {
        ndim: n,
        center: c_target,
        half,
    };
    let mut params = Params {
        m: [[T::zero(); 3]; 3],
        tau: [T::zero(); 3],
    };
    for a in 0..n {
        params.tau[a] = (c_template[a] - c_target[a]) / half[a];
    }

    let mut trace = Vec::new();
    for (k, &factor) in opts.levels.iter().enumerate() {
        let tspacing: Vec<T> = tgrid.spacing().iter().map(|&h| h * factor).collect();
        let ispacing: Vec<T> = template.grid().spacing().iter().map(|&h| h * factor).collect();
        let lt = tgrid.with_spacing(&tspacing)?;
        let li = template.grid().with_spacing(&ispacing)?;
        if factor > T::one() && lt.dims().iter().chain(li.dims()).any(|&d| d < 8) {
            continue;
        }
        let (target_l, template_l);
        let (tl, il) = if factor == T::one() {
            (target, template)
        } else {
            target_l = resample(target, &lt);
            template_l = resample(template, &li);
            (&target_l, &template_l)
        };
        let level = Level {
            template: il,
            target: tl,
            mi: MattesMi::new(opts.bins, il, tl)?,
            frame: &frame,
        };
        if level.mi.is_degenerate() {
            return Err(Error::Degenerate("affine registration needs non-constant images".into()));
        }
        params = optimise_level(&level, params, opts, k, &mut trace)?;
    }
    Ok(AffineResult {
        transform: frame.pullback(&params).inverse()?,
        trace,
    })
}

fn optimise_level<T: Real>(
    level: &Level<'_, T>,
    start: Params<T>,
    opts: &AffineOptions<T>,
    index: usize,
    trace: &mut Vec<AffineTraceEntry<T>>,
) -> Result<Params<T>> {
    let n = level.frame.ndim;
    let mut p = start;
    let (mut value, mut grad) = level.value_and_gradient(&p)?;
    let mut eps = opts.epsilon0;
    let mut entry = |iteration, value, accepted| {
        trace.push(AffineTraceEntry {
            level: index,
            iteration,
            value,
            accepted,
        })
    };
    entry(0, value, true);
    for it in 1..=opts.max_iterations {
        let g = norm(&grad);
        if !(g > T::zero()) || eps < opts.min_step {
            break;
        }
        let s = eps / g;
        let mut trial = p;
        for a in 0..n {
            trial.tau[a] -= s * grad.tau[a];
            for b in 0..n {
                trial.m[a][b] -= s * grad.m[a][b];
            }
        }
        // a step through a singular matrix would flip orientation
        if level.frame.pullback(&trial).det() <= T::zero() {
            entry(it, T::nan(), false);
            eps *= T::lit(SHRINK);
            continue;
        }
        let v = level.value(&trial)?;
        if !v.is_finite() {
            return Err(Error::Diverged {
                iteration: 0,
                trace: format!("affine objective became {v}"),
            });
        }
        entry(it, v, v < value);
        if v < value {
            p = trial;
            (value, grad) = level.value_and_gradient(&p)?;
            eps *= T::lit(GROW);
        } else {
            eps *= T::lit(SHRINK);
        }
    }
    Ok(p)
}
