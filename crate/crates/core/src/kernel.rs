//! The regularising operator `L = -alpha * lap + gamma` (per component) and
//! its smoothing inverse `K = (L^T L)^-1`, both applied in the DFT domain with
//! periodic boundaries.
//!
//! The Laplacian eigenvalues are those of the 3-point periodic stencil,
//! `2 * sum_i (1 - cos(2 pi k_i / n_i)) / h_i^2`, so the spectral operators
//! exactly invert a stencil-based spatial implementation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams<T> {
    pub alpha: T,
    pub gamma: T,
}

impl<T: Real> KernelParams<T> {
    pub fn new(alpha: T, gamma: T) -> Result<Self> {
        let p = KernelParams { alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

struct AxisPlan<T: Real> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

/// Precomputed multipliers of `L` on one grid. Immutable and `Sync`.
pub struct SpectralKernel<T: Real> {
    grid: ImageGrid<T>,
    params: KernelParams<T>,
    /// `A(k)`, eigenvalue of `L` at each DFT index (x-fastest).
    l_multipliers: Vec<T>,
    plans: Vec<AxisPlan<T>>,
}

impl<T: Real> std::fmt::Debug for SpectralKernel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralKernel")
            .field("grid", &self.grid)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

/// Eigenvalue of `-lap` (3-point periodic stencil) for one axis.
fn axis_eigenvalue<T: Real>(k: usize, n: usize, h: T) -> T {
    let theta = T::TAU() * T::from_usize_lossy(k) / T::from_usize_lossy(n);
    T::lit(2.0) * (T::one() - theta.cos()) / (h * h)
}

/// `build_kernel(grid, params)`.
pub fn build_kernel<T: Real>(grid: &ImageGrid<T>, params: KernelParams<T>) -> Result<SpectralKernel<T>> {
    SpectralKernel::new(grid, params)
}

impl<T: Real> SpectralKernel<T> {
    pub fn new(grid: &ImageGrid<T>, params: KernelParams<T>) -> Result<Self> {
        params.validate()?;
        let dims = grid.dims3();
        let spacing = grid.spacing3();
        let eig: Vec<Vec<T>> = (0..grid.ndim())
            .map(|a| (0..dims[a]).map(|k| axis_eigenvalue(k, dims[a], spacing[a])).collect())
            .collect();
        let l_multipliers = (0..grid.len())
            .map(|idx| {
                let c = grid.coords(idx);
                let lap: T = (0..grid.ndim()).map(|a| eig[a][c[a]]).sum();
                params.gamma + params.alpha * lap
            })
            .collect();
        let mut planner = FftPlanner::new();
        let plans = (0..grid.ndim())
            .map(|a| AxisPlan {
                forward: planner.plan_fft_forward(dims[a]),
                inverse: planner.plan_fft_inverse(dims[a]),
            })
            .collect();
        Ok(SpectralKernel {
            grid: grid.clone(),
            params,
            l_multipliers,
            plans,
        })
    }

    pub fn grid(&self) -> &ImageGrid<T> {
        &self.grid
    }

    pub fn params(&self) -> KernelParams<T> {
        self.params
    }

    /// `A(k)` in x-fastest DFT index order.
    pub fn l_multipliers(&self) -> &[T] {
        &self.l_multipliers
    }

    /// `1 / A(k)^2`.
    pub fn k_multipliers(&self) -> Vec<T> {
        self.l_multipliers.iter().map(|&a| T::one() / (a * a)).collect()
    }

    fn fft_axis(&self, buf: &mut [Complex<T>], axis: usize, inverse: bool) {
        let dims = self.grid.dims3();
        let plan = if inverse {
            &self.plans[axis].inverse
        } else {
            &self.plans[axis].forward
        };
        if axis == 0 {
            plan.process(buf);
            return;
        }
        let n = dims[axis];
        let stride = if axis == 1 { dims[0] } else { dims[0] * dims[1] };
        let block = stride * n;
        // gather every line along `axis` contiguously, transform in one call
        let mut lines = Vec::with_capacity(buf.len());
        for start in (0..buf.len()).step_by(block) {
            for offset in 0..stride {
                let base = start + offset;
                lines.extend((0..n).map(|i| buf[base + i * stride]));
            }
        }
        plan.process(&mut lines);
        let mut it = lines.into_iter();
        for start in (0..buf.len()).step_by(block) {
            for offset in 0..stride {
                let base = start + offset;
                for i in 0..n {
                    buf[base + i * stride] = it.next().expect("line length");
                }
            }
        }
    }

    fn apply_scalar<F: Fn(T) -> T>(&self, data: &[T], multiplier: &F) -> Vec<T> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        for a in 0..self.grid.ndim() {
            self.fft_axis(&mut buf, a, false);
        }
        for (b, &a) in buf.iter_mut().zip(&self.l_multipliers) {
            *b *= multiplier(a);
        }
        for a in 0..self.grid.ndim() {
            self.fft_axis(&mut buf, a, true);
        }
        let scale = T::one() / T::from_usize_lossy(buf.len());
        debug_assert!({
            let re = buf.iter().map(|c| c.re.abs()).fold(T::zero(), T::max);
            let im = buf.iter().map(|c| c.im.abs()).fold(T::zero(), T::max);
            im <= T::lit(1e-6) * re.max(T::min_positive_value()) + T::epsilon()
        });
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn apply<F: Fn(T) -> T>(&self, field: &VectorField<T>, multiplier: F) -> Result<VectorField<T>> {
        self.grid.ensure_matches(field.grid(), "spectral operator")?;
        let comps = field
            .components()
            .iter()
            .map(|c| self.apply_scalar(c, &multiplier))
            .collect();
        Ok(VectorField::from_raw(field.grid().clone(), comps))
    }

    /// `K f = (L^T L)^-1 f`.
    pub fn apply_k(&self, field: &VectorField<T>) -> Result<VectorField<T>> {
        self.apply(field, |a| T::one() / (a * a))
    }

    /// `L^T L f`.
    pub fn apply_ldag_l(&self, field: &VectorField<T>) -> Result<VectorField<T>> {
        self.apply(field, |a| a * a)
    }

    pub fn apply_l(&self, field: &VectorField<T>) -> Result<VectorField<T>> {
        self.apply(field, |a| a)
    }
}

/// Discrete H¹ seminorm with periodic forward differences,
/// `sqrt(sum_c sum_a |D_a f_c|^2 dV)`.
pub fn h1_seminorm<T: Real>(field: &VectorField<T>) -> T {
    let grid = field.grid();
    let dims = grid.dims3();
    let spacing = grid.spacing3();
    let mut acc = T::zero();
    for comp in field.components() {
        for a in 0..grid.ndim() {
            let stride = match a {
                0 => 1,
                1 => dims[0],
                _ => dims[0] * dims[1],
            };
            for idx in 0..grid.len() {
                let i = grid.coords(idx)[a];
                let next = if i + 1 == dims[a] { idx - i * stride } else { idx + stride };
                let d = (comp[next] - comp[idx]) / spacing[a];
                acc += d * d;
            }
        }
    }
    (acc * grid.voxel_volume()).sqrt()
}
