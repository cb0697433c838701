//! Time-discretised velocity fields and the semi-Lagrangian construction of
//! the flow maps `phi_{t0}` (pullback to time 0) and `phi_{t1}` (push to time 1).
//!
//! Step `k -> k+1` uses the velocity averaged over the two bounding slices,
//! sampled at the arrival point, with a single interpolation of the previous
//! displacement. Each slice therefore enters the flow with trapezoidal weight,
//! the same weight the regulariser uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DeformationMap, ImageGrid, ImageVolume, Point, VectorField};
use crate::scalar::Real;

/// `T >= 2` velocity slices on a shared grid at `t_j = j / (T - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeVaryingVelocity<T> {
    slices: Vec<VectorField<T>>,
}

impl<T: Real> TimeVaryingVelocity<T> {
    pub fn new(slices: Vec<VectorField<T>>) -> Result<Self> {
        if slices.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 time steps, got {}",
                slices.len()
            )));
        }
        let g = slices[0].grid().clone();
        for s in &slices[1..] {
            g.ensure_matches(s.grid(), "velocity slices")?;
        }
        Ok(TimeVaryingVelocity { slices })
    }

    pub fn zeros(grid: &ImageGrid<T>, time_steps: usize) -> Result<Self> {
        Self::new(vec![VectorField::zeros(grid); time_steps])
    }

    /// The same field at every time step.
    pub fn stationary(field: VectorField<T>, time_steps: usize) -> Result<Self> {
        Self::new(vec![field; time_steps])
    }

    pub fn grid(&self) -> &ImageGrid<T> {
        self.slices[0].grid()
    }

    pub fn time_steps(&self) -> usize {
        self.slices.len()
    }

    pub fn dt(&self) -> T {
        T::one() / T::from_usize_lossy(self.slices.len() - 1)
    }

    pub fn slices(&self) -> &[VectorField<T>] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [VectorField<T>] {
        &mut self.slices
    }

    pub fn slice(&self, j: usize) -> &VectorField<T> {
        &self.slices[j]
    }

    /// Trapezoidal quadrature weight of slice `j` over `[0, 1]`.
    pub fn quadrature_weight(&self, j: usize) -> T {
        let dt = self.dt();
        if j == 0 || j + 1 == self.slices.len() {
            dt * T::lit(0.5)
        } else {
            dt
        }
    }

    /// `self += s * other`, slice by slice.
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            a.axpy(s, b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slices
            .iter()
            .all(|s| s.components().iter().all(|c| c.iter().all(|v| *v == T::zero())))
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j < self.slices.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: j,
                len: self.slices.len(),
            })
        }
    }

    /// Velocity used on the step between slices `k` and `k + 1`.
    pub(crate) fn step_velocity(&self, k: usize) -> VectorField<T> {
        let mut v = self.slices[k].scaled(T::lit(0.5));
        v.axpy(T::lit(0.5), &self.slices[k + 1]);
        v
    }
}

/// One semi-Lagrangian step: `u_new(x) = s*w(x) + u_prev(x + s*w(x))`.
fn advect_step<T: Real>(prev: &VectorField<T>, w: &VectorField<T>, s: T) -> VectorField<T> {
    let grid = prev.grid();
    let nd = grid.ndim();
    let vals: Vec<[T; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut p = grid.point_of(idx);
            let wv = w.at(idx);
            for a in 0..nd {
                p[a] += s * wv[a];
            }
            let u = prev.sample(&p);
            let mut out = [T::zero(); 3];
            for a in 0..nd {
                out[a] = s * wv[a] + u[a];
            }
            out
        })
        .collect();
    let comps = (0..nd).map(|c| vals.iter().map(|v| v[c]).collect()).collect();
    VectorField::from_raw(grid.clone(), comps)
}

/// All pullback maps `phi_{t_j 0}`, `j = 0..T`.
pub fn backward_maps<T: Real>(v: &TimeVaryingVelocity<T>) -> Vec<DeformationMap<T>> {
    let dt = v.dt();
    let mut out = Vec::with_capacity(v.time_steps());
    let mut u = VectorField::zeros(v.grid());
    out.push(DeformationMap::from_displacement(u.clone()));
    for k in 0..v.time_steps() - 1 {
        u = advect_step(&u, &v.step_velocity(k), -dt);
        out.push(DeformationMap::from_displacement(u.clone()));
    }
    out
}

/// All forward maps `phi_{t_j 1}`, `j = 0..T`.
pub fn forward_maps<T: Real>(v: &TimeVaryingVelocity<T>) -> Vec<DeformationMap<T>> {
    let dt = v.dt();
    let n = v.time_steps();
    let mut out = vec![DeformationMap::identity(v.grid()); n];
    let mut u = VectorField::zeros(v.grid());
    for k in (0..n - 1).rev() {
        u = advect_step(&u, &v.step_velocity(k), dt);
        out[k] = DeformationMap::from_displacement(u.clone());
    }
    out
}

/// `phi_{t_j 0}`: `I(t_j) = I_0 o phi_{t_j 0}`.
pub fn integrate_backward<T: Real>(v: &TimeVaryingVelocity<T>, j: usize) -> Result<DeformationMap<T>> {
    v.check_index(j)?;
    let dt = v.dt();
    let mut u = VectorField::zeros(v.grid());
    for k in 0..j {
        u = advect_step(&u, &v.step_velocity(k), -dt);
    }
    Ok(DeformationMap::from_displacement(u))
}

/// `phi_{t_j 1}`, built from `t_{T-1}` back to `t_j`.
pub fn integrate_forward<T: Real>(v: &TimeVaryingVelocity<T>, j: usize) -> Result<DeformationMap<T>> {
    v.check_index(j)?;
    let dt = v.dt();
    let mut u = VectorField::zeros(v.grid());
    for k in (j..v.time_steps() - 1).rev() {
        u = advect_step(&u, &v.step_velocity(k), dt);
    }
    Ok(DeformationMap::from_displacement(u))
}

/// Velocity at time `t` in `[0, 1]`, linear between slices.
fn velocity_at<T: Real>(v: &TimeVaryingVelocity<T>, t: T, p: &Point<T>) -> [T; 3] {
    let last = v.time_steps() - 1;
    let s = (t * T::from_usize_lossy(last)).max(T::zero()).min(T::from_usize_lossy(last));
    let k = s.floor().to_usize().unwrap_or(0).min(last - 1);
    let theta = s - T::from_usize_lossy(k);
    let a = v.slices[k].sample(p);
    let b = v.slices[k + 1].sample(p);
    [
        a[0] + theta * (b[0] - a[0]),
        a[1] + theta * (b[1] - a[1]),
        a[2] + theta * (b[2] - a[2]),
    ]
}

/// Classical RK4 along `dx/dt = v(t, x)` from `t = 0` to `1` (`forward`) or
/// from `1` to `0`, with `substeps` steps per slice interval.
fn trace<T: Real>(v: &TimeVaryingVelocity<T>, p: &Point<T>, forward: bool, substeps: usize) -> Point<T> {
    let n = v.time_steps() - 1;
    let steps = n * substeps.max(1);
    let h = T::one() / T::from_usize_lossy(steps);
    let (mut t, dt) = if forward { (T::zero(), h) } else { (T::one(), -h) };
    let half = T::lit(0.5);
    let mut x = *p;
    let add = |x: &Point<T>, k: &[T; 3], s: T| [x[0] + s * k[0], x[1] + s * k[1], x[2] + s * k[2]];
    for _ in 0..steps {
        let k1 = velocity_at(v, t, &x);
        let k2 = velocity_at(v, t + half * dt, &add(&x, &k1, half * dt));
        let k3 = velocity_at(v, t + half * dt, &add(&x, &k2, half * dt));
        let k4 = velocity_at(v, t + dt, &add(&x, &k3, dt));
        let sixth = dt / T::lit(6.0);
        for a in 0..3 {
            x[a] += sixth * (k1[a] + T::lit(2.0) * (k2[a] + k3[a]) + k4[a]);
        }
        t += dt;
    }
    x
}

/// Trajectory substeps per slice interval in [`trace_points`] and [`trace_map`].
pub const TRACE_SUBSTEPS: usize = 4;

/// Endpoints of particle paths: time-1 positions of points given at time 0
/// (`forward`), or time-0 positions of points given at time 1.
///
/// Only the velocity is interpolated, so unlike the semi-Lagrangian maps
/// there is no accumulated smoothing of the displacement. Used for ground
/// truth.
pub fn trace_points<T: Real>(v: &TimeVaryingVelocity<T>, points: &[Point<T>], forward: bool) -> Vec<Point<T>> {
    points.iter().map(|p| trace(v, p, forward, TRACE_SUBSTEPS)).collect()
}

/// `phi_{01}` (`forward`) or `phi_{10}` by tracing every grid node.
pub fn trace_map<T: Real>(v: &TimeVaryingVelocity<T>, forward: bool) -> DeformationMap<T> {
    let grid = v.grid();
    let nd = grid.ndim();
    let disp: Vec<[T; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point_of(idx);
            let q = trace(v, &p, forward, TRACE_SUBSTEPS);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
        .collect();
    let comps = (0..nd).map(|c| disp.iter().map(|u| u[c]).collect()).collect();
    DeformationMap::from_displacement(VectorField::from_raw(grid.clone(), comps))
}

/// `(outer o inner)(x) = outer(inner(x))`.
pub fn compose<T: Real>(outer: &DeformationMap<T>, inner: &DeformationMap<T>) -> Result<DeformationMap<T>> {
    outer.grid().ensure_matches(inner.grid(), "compose")?;
    let grid = inner.grid();
    let nd = grid.ndim();
    let vals: Vec<[T; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let q = inner.at_voxel(idx);
            let uo = outer.displacement().sample(&q);
            let ui = inner.displacement().at(idx);
            let mut out = [T::zero(); 3];
            for a in 0..nd {
                out[a] = ui[a] + uo[a];
            }
            out
        })
        .collect();
    let comps = (0..nd).map(|c| vals.iter().map(|v| v[c]).collect()).collect();
    Ok(DeformationMap::from_displacement(VectorField::from_raw(grid.clone(), comps)))
}

/// `output(x) = img(phi(x))` on the map's grid; `img` may live on any grid.
pub fn deform_image<T: Real>(img: &ImageVolume<T>, map: &DeformationMap<T>) -> ImageVolume<T> {
    let grid = map.grid().clone();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| img.sample(&map.at_voxel(idx)))
        .collect();
    ImageVolume::from_raw(grid, data)
}

/// Like [`deform_image`] with nearest-neighbour sampling (label images).
pub fn deform_image_nearest<T: Real>(img: &ImageVolume<T>, map: &DeformationMap<T>) -> ImageVolume<T> {
    let grid = map.grid().clone();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| img.sample_nearest(&map.at_voxel(idx)))
        .collect();
    ImageVolume::from_raw(grid, data)
}

/// Numerically invert a map by fixed-point iteration `y <- p - u(y)`.
pub fn invert_point<T: Real>(map: &DeformationMap<T>, p: &crate::grid::Point<T>) -> crate::grid::Point<T> {
    let nd = map.grid().ndim();
    let mut y = *p;
    for _ in 0..100 {
        let u = map.displacement().sample(&y);
        let mut next = *p;
        let mut change = T::zero();
        for a in 0..nd {
            next[a] = p[a] - u[a];
            change = change.max((next[a] - y[a]).abs());
        }
        y = next;
        if change <= T::epsilon() * T::lit(64.0) * (T::one() + p[0].abs()) {
            break;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::interior_indices;

    fn grid(n: usize) -> ImageGrid<f64> {
        ImageGrid::with_dims(&[n, n]).unwrap()
    }

    #[test]
    fn needs_two_time_steps() {
        assert!(TimeVaryingVelocity::zeros(&grid(4), 1).is_err());
        let v = TimeVaryingVelocity::zeros(&grid(4), 3).unwrap();
        assert!(integrate_backward(&v, 3).is_err());
        assert!(integrate_forward(&v, 7).is_err());
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let v = TimeVaryingVelocity::zeros(&grid(6), 5).unwrap();
        for m in backward_maps(&v).iter().chain(forward_maps(&v).iter()) {
            assert!(m.is_identity());
        }
        let img = ImageVolume::from_fn(&grid(6), |p| p[0] * p[1]);
        assert_eq!(deform_image(&img, &integrate_backward(&v, 4).unwrap()), img);
    }

    #[test]
    fn constant_velocity_translates() {
        let g = grid(16);
        let c = [1.5, -0.75];
        let v = TimeVaryingVelocity::stationary(VectorField::from_fn(&g, |_| [c[0], c[1], 0.0]), 6).unwrap();
        let back = integrate_backward(&v, 5).unwrap();
        let fwd = integrate_forward(&v, 0).unwrap();
        for idx in interior_indices(&g, 3) {
            let ub = back.displacement().at(idx);
            let uf = fwd.displacement().at(idx);
            assert!((ub[0] + c[0]).abs() < 1e-12 && (ub[1] + c[1]).abs() < 1e-12);
            assert!((uf[0] - c[0]).abs() < 1e-12 && (uf[1] - c[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_maps_agree_with_single_index() {
        let g = grid(12);
        let slices = (0..4)
            .map(|t| {
                VectorField::from_fn(&g, move |p| {
                    [0.3 * (p[1] * 0.4 + t as f64).sin(), 0.2 * (p[0] * 0.3).cos(), 0.0]
                })
            })
            .collect();
        let v = TimeVaryingVelocity::new(slices).unwrap();
        let b = backward_maps(&v);
        let f = forward_maps(&v);
        for j in 0..4 {
            assert_eq!(b[j], integrate_backward(&v, j).unwrap());
            assert_eq!(f[j], integrate_forward(&v, j).unwrap());
        }
    }

    #[test]
    fn traced_rotation_matches_the_exact_solution() {
        // rigid rotation at unit angular speed: x(1) = R(1) x(0)
        let g = ImageGrid::new(&[33, 33], &[0.125, 0.125], &[-2.0, -2.0]).unwrap();
        let v = TimeVaryingVelocity::stationary(VectorField::from_fn(&g, |p| [-p[1], p[0], 0.0]), 10).unwrap();
        let pts = [[0.5, 0.25, 0.0], [-0.8, 0.3, 0.0]];
        let (s, c) = 1.0f64.sin_cos();
        for (p, q) in pts.iter().zip(trace_points(&v, &pts, true)) {
            assert!((q[0] - (c * p[0] - s * p[1])).abs() < 1e-6);
            assert!((q[1] - (s * p[0] + c * p[1])).abs() < 1e-6);
        }
        let back = trace_points(&v, &trace_points(&v, &pts, true), false);
        for (p, q) in pts.iter().zip(&back) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
        let fwd = trace_map(&v, true);
        let idx = g.index([20, 18, 0]);
        let p = g.point_of(idx);
        let (a, b) = (fwd.at_voxel(idx), trace_points(&v, &[p], true)[0]);
        assert!((a[0] - b[0]).abs() < 1e-14 && (a[1] - b[1]).abs() < 1e-14);
    }

    #[test]
    fn traced_time_dependent_velocity_uses_linear_slices() {
        // v(t) = t * c: displacement c / 2
        let g = grid(8);
        let slices = (0..5)
            .map(|j| VectorField::from_fn(&g, move |_| [0.4 * j as f64 / 4.0, 0.0, 0.0]))
            .collect();
        let v = TimeVaryingVelocity::new(slices).unwrap();
        let q = trace_points(&v, &[[3.0, 3.0, 0.0]], true)[0];
        assert!((q[0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn compose_identity_and_translations() {
        let g = grid(10);
        let m = DeformationMap::from_fn(&g, |p| [p[0] + 0.1 * p[1], p[1] - 0.2, 0.0]);
        let id = DeformationMap::identity(&g);
        assert_eq!(compose(&id, &m).unwrap(), m);
        assert_eq!(compose(&m, &id).unwrap(), m);
        let a = DeformationMap::from_fn(&g, |p| [p[0] + 1.0, p[1] - 0.5, 0.0]);
        let b = DeformationMap::from_fn(&g, |p| [p[0] + 0.25, p[1] + 1.0, 0.0]);
        let ab = compose(&a, &b).unwrap();
        for idx in interior_indices(&g, 2) {
            let u = ab.displacement().at(idx);
            assert!((u[0] - 1.25).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
        }
        assert!(compose(&a, &DeformationMap::identity(&grid(9))).is_err());
    }

    #[test]
    fn one_voxel_translation_shifts_image() {
        let g = grid(8);
        let img = ImageVolume::from_fn(&g, |p| (p[0] * 1.3).sin() + p[1]);
        let shift = DeformationMap::from_fn(&g, |p| [p[0] - 1.0, p[1], 0.0]);
        let out = deform_image(&img, &shift);
        for j in 0..8 {
            for i in 1..8 {
                assert_eq!(out.get([i, j, 0]), img.get([i - 1, j, 0]));
            }
        }
    }

    #[test]
    fn invert_point_recovers_translation() {
        let g = grid(10);
        let m = DeformationMap::from_fn(&g, |p| [p[0] + 0.7, p[1] - 0.3, 0.0]);
        let y = invert_point(&m, &[5.0, 5.0, 0.0]);
        assert!((y[0] - 4.3).abs() < 1e-12 && (y[1] - 5.3).abs() < 1e-12);
    }
}
