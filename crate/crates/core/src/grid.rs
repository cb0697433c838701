//! Regular grids, scalar volumes, vector fields and deformation maps.
//!
//! Voxel data is stored in x-fastest linear order: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Two-dimensional grids carry a trailing unit z-axis
//! internally; it never shows up through the public accessors.
//!
//! All coordinates handed to or returned by this module are physical
//! (`origin + index * spacing`). Sampling outside the grid clamps to the
//! nearest edge voxel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Physical coordinate. Two-dimensional grids ignore the last entry.
pub type Point<T> = [T; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    ndim: usize,
    dims: [usize; 3],
    spacing: [T; 3],
    origin: [T; 3],
}

impl<T: Real> ImageGrid<T> {
    pub fn new(dims: &[usize], spacing: &[T], origin: &[T]) -> Result<Self> {
        let ndim = dims.len();
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidGrid(format!("expected 2 or 3 axes, got {ndim}")));
        }
        if spacing.len() != ndim || origin.len() != ndim {
            return Err(Error::InvalidGrid(format!(
                "axis count mismatch: dims {ndim}, spacing {}, origin {}",
                spacing.len(),
                origin.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidGrid(format!("every axis needs at least 2 voxels, got {d}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= T::zero()) {
            return Err(Error::InvalidGrid("spacing must be finite and positive".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let mut g = ImageGrid {
            ndim,
            dims: [1; 3],
            spacing: [T::one(); 3],
            origin: [T::zero(); 3],
        };
        g.dims[..ndim].copy_from_slice(dims);
        g.spacing[..ndim].copy_from_slice(spacing);
        g.origin[..ndim].copy_from_slice(origin);
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: &[usize]) -> Result<Self> {
        let n = dims.len();
        Self::new(dims, &vec![T::one(); n], &vec![T::zero(); n])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing[..self.ndim]
    }

    pub fn origin(&self) -> &[T] {
        &self.origin[..self.ndim]
    }

    pub(crate) fn dims3(&self) -> [usize; 3] {
        self.dims
    }

    pub(crate) fn spacing3(&self) -> [T; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn voxel_volume(&self) -> T {
        self.spacing().iter().fold(T::one(), |acc, &h| acc * h)
    }

    /// Total volume of the cell-covered box, `prod(n_i * h_i)`.
    pub fn domain_volume(&self) -> T {
        self.voxel_volume() * T::from_usize_lossy(self.len())
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn point(&self, ijk: [usize; 3]) -> Point<T> {
        let mut p = [T::zero(); 3];
        for a in 0..self.ndim {
            p[a] = self.origin[a] + T::from_usize_lossy(ijk[a]) * self.spacing[a];
        }
        p
    }

    #[inline]
    pub fn point_of(&self, idx: usize) -> Point<T> {
        self.point(self.coords(idx))
    }

    /// Continuous voxel index of a physical point (no clamping).
    pub fn continuous_index(&self, p: &Point<T>) -> [T; 3] {
        let mut c = [T::zero(); 3];
        for a in 0..self.ndim {
            c[a] = (p[a] - self.origin[a]) / self.spacing[a];
        }
        c
    }

    /// Physical centre of the voxel-centre hull.
    pub fn center(&self) -> Point<T> {
        let mut c = [T::zero(); 3];
        let half = T::lit(0.5);
        for a in 0..self.ndim {
            c[a] = self.origin[a] + T::from_usize_lossy(self.dims[a] - 1) * self.spacing[a] * half;
        }
        c
    }

    /// Edge length `n_i * h_i` of the cell-covered box per axis.
    pub fn extent(&self) -> Vec<T> {
        (0..self.ndim)
            .map(|a| T::from_usize_lossy(self.dims[a]) * self.spacing[a])
            .collect()
    }

    /// Same geometry up to a small relative tolerance (survives f32 round trips).
    pub fn matches(&self, other: &Self) -> bool {
        if self.ndim != other.ndim || self.dims != other.dims {
            return false;
        }
        let tol = T::lit(1e-5);
        (0..self.ndim).all(|a| {
            let h = self.spacing[a];
            (h - other.spacing[a]).abs() <= tol * h
                && (self.origin[a] - other.origin[a]).abs() <= tol * h
        })
    }

    pub(crate) fn ensure_matches(&self, other: &Self, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims(),
                self.spacing(),
                self.origin(),
                other.dims(),
                other.spacing(),
                other.origin()
            )))
        }
    }

    /// Grid covering the same cell box with a new spacing. The voxel count per
    /// axis is rounded to the nearest integer (at least 2) and the spacing is
    /// then adjusted so the box is preserved exactly.
    pub fn with_spacing(&self, spacing: &[T]) -> Result<Self> {
        if spacing.len() != self.ndim {
            return Err(Error::InvalidGrid("spacing has the wrong number of axes".into()));
        }
        let half = T::lit(0.5);
        let mut dims = Vec::with_capacity(self.ndim);
        let mut new_spacing = Vec::with_capacity(self.ndim);
        let mut origin = Vec::with_capacity(self.ndim);
        for a in 0..self.ndim {
            if !(spacing[a] > T::zero()) {
                return Err(Error::InvalidGrid("spacing must be positive".into()));
            }
            let length = T::from_usize_lossy(self.dims[a]) * self.spacing[a];
            let n = (length / spacing[a]).round().to_usize().unwrap_or(2).max(2);
            let h = length / T::from_usize_lossy(n);
            let start = self.origin[a] - half * self.spacing[a];
            dims.push(n);
            new_spacing.push(h);
            origin.push(start + half * h);
        }
        Self::new(&dims, &new_spacing, &origin)
    }

    /// Multilinear interpolation stencil for a physical point, clamped to the grid.
    #[inline]
    pub(crate) fn stencil(&self, p: &Point<T>) -> Stencil<T> {
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..self.ndim {
            let n = self.dims[a];
            let last = T::from_usize_lossy(n - 1);
            let mut c = (p[a] - self.origin[a]) / self.spacing[a];
            if !(c > T::zero()) {
                c = T::zero();
            } else if c > last {
                c = last;
            }
            // snap round-off so grid nodes reproduce stored values exactly
            let r = c.round();
            if (c - r).abs() <= T::epsilon() * T::lit(16.0) * (T::one() + r) {
                c = r;
            }
            let mut i = c.floor().to_usize().unwrap_or(0);
            if i >= n - 1 {
                i = n - 2;
            }
            base[a] = i;
            frac[a] = c - T::from_usize_lossy(i);
        }
        let corners = 1usize << self.ndim;
        let mut st = Stencil {
            idx: [0; 8],
            w: [T::zero(); 8],
            len: corners,
        };
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let strides = [sx, sy, sz];
        for c in 0..corners {
            let mut idx = 0;
            let mut w = T::one();
            for a in 0..self.ndim {
                if c >> a & 1 == 1 {
                    idx += (base[a] + 1) * strides[a];
                    w *= frac[a];
                } else {
                    idx += base[a] * strides[a];
                    w *= T::one() - frac[a];
                }
            }
            st.idx[c] = idx;
            st.w[c] = w;
        }
        st
    }

    /// Stencil of `d/dp_axis` of the clamped multilinear interpolant at `p`.
    ///
    /// Inside a cell this is the cell slope. Exactly on a node it is the mean
    /// of the two one-sided slopes (half the inner slope on a boundary node),
    /// which is what a central difference of the interpolant sees. Strictly
    /// outside the grid along `axis` the derivative is zero.
    pub(crate) fn derivative_stencil(&self, p: &Point<T>, axis: usize) -> Stencil<T> {
        let mut st = Stencil {
            idx: [0; 8],
            w: [T::zero(); 8],
            len: 0,
        };
        let n = self.dims[axis];
        let last = T::from_usize_lossy(n - 1);
        let h = self.spacing[axis];
        let mut c = (p[axis] - self.origin[axis]) / h;
        let r = c.round();
        if (c - r).abs() <= T::epsilon() * T::lit(16.0) * (T::one() + r.abs()) {
            c = r;
        }
        if c < T::zero() || c > last {
            return st;
        }
        let half = T::lit(0.5);
        let (lo, hi, coef) = if c == c.floor() {
            let m = c.to_usize().unwrap_or(0);
            if m == 0 {
                (0, 1, half / h)
            } else if m == n - 1 {
                (n - 2, n - 1, half / h)
            } else {
                (m - 1, m + 1, half / h)
            }
        } else {
            let lo = c.floor().to_usize().unwrap_or(0).min(n - 2);
            (lo, lo + 1, T::one() / h)
        };
        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        // bilinear weights over the remaining axes
        let mut others: [(usize, T); 4] = [(0, T::one()); 4];
        let mut count = 1;
        for b in 0..self.ndim {
            if b == axis {
                continue;
            }
            let nb = self.dims[b];
            let lastb = T::from_usize_lossy(nb - 1);
            let mut cb = (p[b] - self.origin[b]) / self.spacing[b];
            if !(cb > T::zero()) {
                cb = T::zero();
            } else if cb > lastb {
                cb = lastb;
            }
            let rb = cb.round();
            if (cb - rb).abs() <= T::epsilon() * T::lit(16.0) * (T::one() + rb) {
                cb = rb;
            }
            let mut i = cb.floor().to_usize().unwrap_or(0);
            if i >= nb - 1 {
                i = nb - 2;
            }
            let f = cb - T::from_usize_lossy(i);
            for k in 0..count {
                let (off, w) = others[k];
                others[k] = (off + i * strides[b], w * (T::one() - f));
                others[k + count] = (off + (i + 1) * strides[b], w * f);
            }
            count *= 2;
        }
        for &(off, w) in &others[..count] {
            st.idx[st.len] = off + lo * strides[axis];
            st.w[st.len] = -coef * w;
            st.idx[st.len + 1] = off + hi * strides[axis];
            st.w[st.len + 1] = coef * w;
            st.len += 2;
        }
        st
    }

    /// Linear index of the voxel nearest to `p` after clamping.
    #[inline]
    pub(crate) fn nearest_index(&self, p: &Point<T>) -> usize {
        let mut ijk = [0usize; 3];
        for a in 0..self.ndim {
            let last = T::from_usize_lossy(self.dims[a] - 1);
            let c = ((p[a] - self.origin[a]) / self.spacing[a]).max(T::zero()).min(last);
            ijk[a] = c.round().to_usize().unwrap_or(0);
        }
        self.index(ijk)
    }

    pub(crate) fn check_point(&self, p: &[T]) -> Result<Point<T>> {
        if p.len() < self.ndim || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePoint(p.iter().map(|v| v.to_f64_lossy()).collect()));
        }
        let mut q = [T::zero(); 3];
        q[..self.ndim].copy_from_slice(&p[..self.ndim]);
        Ok(q)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    pub idx: [usize; 8],
    pub w: [T; 8],
    pub len: usize,
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub fn apply(&self, data: &[T]) -> T {
        let mut acc = T::zero();
        for c in 0..self.len {
            acc += self.w[c] * data[self.idx[c]];
        }
        acc
    }

    /// `data[idx] += w * value` over the stencil (transpose of [`Stencil::apply`]).
    #[inline]
    pub fn scatter(&self, value: T, data: &mut [T]) {
        for c in 0..self.len {
            data[self.idx[c]] += self.w[c] * value;
        }
    }
}

fn check_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidData(format!("{what} contains non-finite values")))
    }
}

/// Scalar image on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume<T> {
    grid: ImageGrid<T>,
    data: Vec<T>,
}

impl<T: Real> ImageVolume<T> {
    pub fn new(grid: ImageGrid<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidData(format!(
                "expected {} voxels, got {}",
                grid.len(),
                data.len()
            )));
        }
        check_finite(&data, "image")?;
        Ok(ImageVolume { grid, data })
    }

    pub fn zeros(grid: &ImageGrid<T>) -> Self {
        Self::filled(grid, T::zero())
    }

    pub fn filled(grid: &ImageGrid<T>, value: T) -> Self {
        ImageVolume {
            grid: grid.clone(),
            data: vec![value; grid.len()],
        }
    }

    /// Evaluate `f` at the physical position of every voxel.
    pub fn from_fn<F>(grid: &ImageGrid<T>, f: F) -> Self
    where
        F: Fn(&Point<T>) -> T + Sync,
    {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(&grid.point_of(idx)))
            .collect();
        ImageVolume {
            grid: grid.clone(),
            data,
        }
    }

    pub(crate) fn from_raw(grid: ImageGrid<T>, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        ImageVolume { grid, data }
    }

    pub fn grid(&self) -> &ImageGrid<T> {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, ijk: [usize; 3]) -> T {
        self.data[self.grid.index(ijk)]
    }

    pub fn map<F: Fn(T) -> T + Sync>(&self, f: F) -> Self {
        ImageVolume {
            grid: self.grid.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Clamped multilinear sample at a physical point (point assumed finite).
    #[inline]
    pub fn sample(&self, p: &Point<T>) -> T {
        self.grid.stencil(p).apply(&self.data)
    }

    /// Gradient of the interpolant itself at `p` (see `derivative_stencil`).
    #[inline]
    pub fn sample_gradient(&self, p: &Point<T>) -> [T; 3] {
        let mut g = [T::zero(); 3];
        for (a, ga) in g.iter_mut().enumerate().take(self.grid.ndim()) {
            *ga = self.grid.derivative_stencil(p, a).apply(&self.data);
        }
        g
    }

    #[inline]
    pub fn sample_nearest(&self, p: &Point<T>) -> T {
        self.data[self.grid.nearest_index(p)]
    }

    /// Voxel-volume weighted L² inner product.
    pub fn dot(&self, other: &Self) -> T {
        let s: T = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum();
        s * self.grid.voxel_volume()
    }
}

/// `interpolate(img, point)`: clamped multilinear interpolation, exact at nodes.
pub fn interpolate<T: Real>(img: &ImageVolume<T>, point: &[T]) -> Result<T> {
    let p = img.grid.check_point(point)?;
    Ok(img.sample(&p))
}

/// N-vector per voxel, stored as one plane per component.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    grid: ImageGrid<T>,
    components: Vec<Vec<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(grid: ImageGrid<T>, components: Vec<Vec<T>>) -> Result<Self> {
        if components.len() != grid.ndim() {
            return Err(Error::InvalidData(format!(
                "expected {} components, got {}",
                grid.ndim(),
                components.len()
            )));
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(Error::InvalidData("component length differs from voxel count".into()));
            }
            check_finite(c, "vector field")?;
        }
        Ok(VectorField { grid, components })
    }

    pub fn zeros(grid: &ImageGrid<T>) -> Self {
        VectorField {
            grid: grid.clone(),
            components: vec![vec![T::zero(); grid.len()]; grid.ndim()],
        }
    }

    pub fn from_fn<F>(grid: &ImageGrid<T>, f: F) -> Self
    where
        F: Fn(&Point<T>) -> [T; 3] + Sync,
    {
        let vals: Vec<[T; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(&grid.point_of(idx)))
            .collect();
        let components = (0..grid.ndim())
            .map(|c| vals.iter().map(|v| v[c]).collect())
            .collect();
        VectorField {
            grid: grid.clone(),
            components,
        }
    }

    pub(crate) fn from_raw(grid: ImageGrid<T>, components: Vec<Vec<T>>) -> Self {
        VectorField { grid, components }
    }

    pub fn grid(&self) -> &ImageGrid<T> {
        &self.grid
    }

    pub fn ndim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn component(&self, c: usize) -> &[T] {
        &self.components[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.components[c]
    }

    pub fn components(&self) -> &[Vec<T>] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Vec<T>> {
        self.components
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [T; 3] {
        let mut v = [T::zero(); 3];
        for (c, comp) in self.components.iter().enumerate() {
            v[c] = comp[idx];
        }
        v
    }

    #[inline]
    pub fn sample(&self, p: &Point<T>) -> [T; 3] {
        let st = self.grid.stencil(p);
        let mut v = [T::zero(); 3];
        for (c, comp) in self.components.iter().enumerate() {
            v[c] = st.apply(comp);
        }
        v
    }

    /// `jac[c][a] = d v_c / d p_a` of the interpolated field at `p`.
    #[inline]
    pub fn sample_jacobian(&self, p: &Point<T>) -> [[T; 3]; 3] {
        let mut jac = [[T::zero(); 3]; 3];
        for a in 0..self.grid.ndim() {
            let st = self.grid.derivative_stencil(p, a);
            for (c, comp) in self.components.iter().enumerate() {
                jac[c][a] = st.apply(comp);
            }
        }
        jac
    }

    pub fn scaled(&self, s: T) -> Self {
        VectorField {
            grid: self.grid.clone(),
            components: self
                .components
                .iter()
                .map(|c| c.iter().map(|&v| v * s).collect())
                .collect(),
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    /// Voxel-volume weighted L² inner product summed over components.
    pub fn dot(&self, other: &Self) -> T {
        let s: T = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>())
            .sum();
        s * self.grid.voxel_volume()
    }

    /// Largest Euclidean vector norm over all voxels.
    pub fn max_norm(&self) -> T {
        (0..self.grid.len())
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c[i] * c[i])
                    .sum::<T>()
                    .sqrt()
            })
            .fold(T::zero(), T::max)
    }
}

/// Sampled map `phi(x) = x + u(x)` with `u` in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap<T> {
    displacement: VectorField<T>,
}

impl<T: Real> DeformationMap<T> {
    pub fn identity(grid: &ImageGrid<T>) -> Self {
        DeformationMap {
            displacement: VectorField::zeros(grid),
        }
    }

    pub fn from_displacement(displacement: VectorField<T>) -> Self {
        DeformationMap { displacement }
    }

    /// Build from the map itself, `phi(p)`, evaluated at every voxel.
    pub fn from_fn<F>(grid: &ImageGrid<T>, phi: F) -> Self
    where
        F: Fn(&Point<T>) -> Point<T> + Sync,
    {
        let displacement = VectorField::from_fn(grid, |p| {
            let q = phi(p);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        });
        DeformationMap { displacement }
    }

    pub fn grid(&self) -> &ImageGrid<T> {
        self.displacement.grid()
    }

    pub fn displacement(&self) -> &VectorField<T> {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField<T> {
        self.displacement
    }

    /// `phi(p)`, with the displacement interpolated (clamped) at `p`.
    #[inline]
    pub fn apply(&self, p: &Point<T>) -> Point<T> {
        let u = self.displacement.sample(p);
        let mut q = *p;
        for a in 0..self.grid().ndim() {
            q[a] += u[a];
        }
        q
    }

    /// `phi` evaluated at voxel `idx` without interpolation.
    #[inline]
    pub fn at_voxel(&self, idx: usize) -> Point<T> {
        let mut p = self.grid().point_of(idx);
        let u = self.displacement.at(idx);
        for a in 0..self.grid().ndim() {
            p[a] += u[a];
        }
        p
    }

    pub fn is_identity(&self) -> bool {
        self.displacement
            .components()
            .iter()
            .all(|c| c.iter().all(|v| *v == T::zero()))
    }
}

/// Derivative of one plane along `axis`: central inside, one-sided at the ends.
pub(crate) fn partial_derivative<T: Real>(grid: &ImageGrid<T>, data: &[T], axis: usize) -> Vec<T> {
    let dims = grid.dims3();
    let h = grid.spacing3()[axis];
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let inv_h = T::one() / h;
    let inv_2h = T::lit(0.5) / h;
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let i = grid.coords(idx)[axis];
            if i == 0 {
                (data[idx + stride] - data[idx]) * inv_h
            } else if i == n - 1 {
                (data[idx] - data[idx - stride]) * inv_h
            } else {
                (data[idx + stride] - data[idx - stride]) * inv_2h
            }
        })
        .collect()
}

/// Spatial gradient in physical units.
pub fn gradient<T: Real>(img: &ImageVolume<T>) -> VectorField<T> {
    let comps = (0..img.grid.ndim())
        .map(|a| partial_derivative(&img.grid, &img.data, a))
        .collect();
    VectorField::from_raw(img.grid.clone(), comps)
}

/// Separable Gaussian blur; `sigma` in voxels per axis, zero disables an axis.
/// Edges are clamped and the kernel is truncated at three standard deviations.
pub fn gaussian_blur<T: Real>(img: &ImageVolume<T>, sigma: &[T]) -> ImageVolume<T> {
    let grid = img.grid.clone();
    let mut data = img.data.clone();
    let dims = grid.dims3();
    for a in 0..grid.ndim() {
        let s = sigma[a];
        if !(s > T::zero()) {
            continue;
        }
        let radius = (s * T::lit(3.0)).ceil().to_usize().unwrap_or(1).max(1);
        let mut kernel: Vec<T> = (0..=2 * radius)
            .map(|i| {
                let x = T::from_usize_lossy(i) - T::from_usize_lossy(radius);
                (-(x * x) / (T::lit(2.0) * s * s)).exp()
            })
            .collect();
        let norm: T = kernel.iter().copied().sum();
        kernel.iter_mut().for_each(|k| *k /= norm);
        let stride = match a {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let n = dims[a] as isize;
        let src = data.clone();
        data.par_iter_mut().enumerate().for_each(|(idx, out)| {
            let i = grid.coords(idx)[a] as isize;
            let line_start = idx - (i as usize) * stride;
            let mut acc = T::zero();
            for (k, &w) in kernel.iter().enumerate() {
                let j = (i + k as isize - radius as isize).clamp(0, n - 1) as usize;
                acc += w * src[line_start + j * stride];
            }
            *out = acc;
        });
    }
    ImageVolume::from_raw(grid, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AntiAlias {
    /// Blur axes that get coarser before sampling.
    Auto,
    Off,
}

/// Anti-alias blur width (voxels of `src`) used when resampling onto `target`.
pub fn anti_alias_sigma<T: Real>(src: &ImageGrid<T>, target: &ImageGrid<T>) -> Vec<T> {
    (0..src.ndim())
        .map(|a| {
            let ratio = target.spacing()[a] / src.spacing()[a];
            if ratio > T::one() + T::lit(1e-9) {
                T::lit(0.5) * ratio
            } else {
                T::zero()
            }
        })
        .collect()
}

pub fn resample<T: Real>(img: &ImageVolume<T>, target: &ImageGrid<T>) -> ImageVolume<T> {
    resample_with(img, target, AntiAlias::Auto)
}

pub fn resample_with<T: Real>(
    img: &ImageVolume<T>,
    target: &ImageGrid<T>,
    anti_alias: AntiAlias,
) -> ImageVolume<T> {
    let blurred;
    let src = match anti_alias {
        AntiAlias::Auto => {
            let sigma = anti_alias_sigma(&img.grid, target);
            if sigma.iter().any(|s| *s > T::zero()) {
                blurred = gaussian_blur(img, &sigma);
                &blurred
            } else {
                img
            }
        }
        AntiAlias::Off => img,
    };
    ImageVolume::from_fn(target, |p| src.sample(p))
}

/// Nearest-neighbour resampling, for categorical (label) images.
pub fn resample_nearest<T: Real>(img: &ImageVolume<T>, target: &ImageGrid<T>) -> ImageVolume<T> {
    ImageVolume::from_fn(target, |p| img.sample_nearest(p))
}

/// Determinant of `D(phi)` with `phi = x + u`, by finite differences of `u`.
/// Negative values (folding) are kept as is.
pub fn jacobian_determinant<T: Real>(map: &DeformationMap<T>) -> ImageVolume<T> {
    let grid = map.grid().clone();
    let n = grid.ndim();
    // du[c][a] = d u_c / d x_a
    let du: Vec<Vec<Vec<T>>> = (0..n)
        .map(|c| {
            (0..n)
                .map(|a| partial_derivative(&grid, map.displacement().component(c), a))
                .collect()
        })
        .collect();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let j = |c: usize, a: usize| {
                let d = du[c][a][idx];
                if c == a {
                    T::one() + d
                } else {
                    d
                }
            };
            if n == 2 {
                j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0)
            } else {
                j(0, 0) * (j(1, 1) * j(2, 2) - j(1, 2) * j(2, 1))
                    - j(0, 1) * (j(1, 0) * j(2, 2) - j(1, 2) * j(2, 0))
                    + j(0, 2) * (j(1, 0) * j(2, 1) - j(1, 1) * j(2, 0))
            }
        })
        .collect();
    ImageVolume::from_raw(grid, data)
}

/// Voxels at least `margin` away from every face.
pub fn interior_indices<T: Real>(grid: &ImageGrid<T>, margin: usize) -> Vec<usize> {
    let dims = grid.dims3();
    let nd = grid.ndim();
    (0..grid.len())
        .filter(|&idx| {
            let c = grid.coords(idx);
            (0..nd).all(|a| c[a] >= margin && c[a] + margin < dims[a])
        })
        .collect()
}
