//! Coarse-to-fine and cascaded-smoothness schedules.
//!
//! Each level registers the two images resampled (anti-aliased) onto a grid
//! with the level's spacing, using the level's `alpha` and iteration budget,
//! and starts from the previous level's velocity interpolated onto the new
//! grid. Velocities are in physical units, so interpolation needs no
//! rescaling. Matching is evaluated on the level grid itself.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TimeVaryingVelocity;
use crate::grid::{resample, ImageGrid, ImageVolume, VectorField};
use crate::lddmm::{register, trace_csv, RegistrationConfig, RegistrationResult};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    /// Physical spacing per axis.
    pub spacing: Vec<f64>,
    pub alpha: f64,
    pub iterations: usize,
}

/// Serialised as a bare JSON array of levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub levels: Vec<Level>,
}

impl Schedule {
    /// Levels at `factor * native spacing`, coarse to fine.
    pub fn pyramid<T: Real>(grid: &ImageGrid<T>, factors: &[f64], alpha: f64, iterations: usize) -> Self {
        Schedule {
            levels: factors
                .iter()
                .map(|&f| Level {
                    spacing: grid.spacing().iter().map(|h| h.to_f64_lossy() * f).collect(),
                    alpha,
                    iterations,
                })
                .collect(),
        }
    }

    /// 8x, 4x, 2x, 1x the native spacing.
    pub fn default_pyramid<T: Real>(grid: &ImageGrid<T>, alpha: f64, iterations: usize) -> Self {
        Self::pyramid(grid, &[8.0, 4.0, 2.0, 1.0], alpha, iterations)
    }

    /// Decreasing `alpha` at the native spacing.
    pub fn cascade<T: Real>(grid: &ImageGrid<T>, alphas: &[f64], iterations: usize) -> Self {
        let spacing: Vec<f64> = grid.spacing().iter().map(|h| h.to_f64_lossy()).collect();
        Schedule {
            levels: alphas
                .iter()
                .map(|&alpha| Level {
                    spacing: spacing.clone(),
                    alpha,
                    iterations,
                })
                .collect(),
        }
    }

    /// Cascade 0.05, 0.02, 0.01 at native spacing.
    pub fn default_cascade<T: Real>(grid: &ImageGrid<T>, iterations: usize) -> Self {
        Self::cascade(grid, &[0.05, 0.02, 0.01], iterations)
    }

    pub fn single<T: Real>(grid: &ImageGrid<T>, alpha: f64, iterations: usize) -> Self {
        Self::pyramid(grid, &[1.0], alpha, iterations)
    }

    pub fn validate(&self, ndim: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one level".into()));
        }
        for (k, l) in self.levels.iter().enumerate() {
            if l.spacing.len() != ndim {
                return Err(Error::InvalidParameter(format!(
                    "level {k}: spacing has {} axes, images have {ndim}",
                    l.spacing.len()
                )));
            }
            if l.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::InvalidParameter(format!("level {k}: spacing must be positive")));
            }
            if !(l.alpha >= 0.0) || !l.alpha.is_finite() {
                return Err(Error::InvalidParameter(format!("level {k}: alpha must be non-negative")));
            }
            if l.iterations < 1 {
                return Err(Error::InvalidParameter(format!("level {k}: iterations must be at least 1")));
            }
            if k > 0 {
                let prev = &self.levels[k - 1];
                if l.spacing.iter().zip(&prev.spacing).any(|(s, p)| s > p) {
                    return Err(Error::InvalidParameter(format!(
                        "level {k}: spacing must not increase from one level to the next"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn cell_box<T: Real>(grid: &ImageGrid<T>, a: usize) -> (T, T) {
    let h = grid.spacing()[a];
    let lo = grid.origin()[a] - T::lit(0.5) * h;
    (lo, lo + h * T::from_usize_lossy(grid.dims()[a]))
}

/// Interpolate every slice of `v` onto the finer (or equal) grid `target`
/// covering the same physical box.
pub fn upsample_velocity<T: Real>(v: &TimeVaryingVelocity<T>, target: &ImageGrid<T>) -> Result<TimeVaryingVelocity<T>> {
    let src = v.grid();
    if src.ndim() != target.ndim() {
        return Err(Error::GridMismatch("velocity and target grid dimension differ".into()));
    }
    if src.matches(target) {
        return Ok(v.clone());
    }
    for a in 0..src.ndim() {
        let (s0, s1) = cell_box(src, a);
        let (t0, t1) = cell_box(target, a);
        let tol = T::lit(1e-6) * (s1 - s0).abs().max(T::one());
        if (s0 - t0).abs() > tol || (s1 - t1).abs() > tol {
            return Err(Error::GridMismatch(format!(
                "extent mismatch on axis {a}: [{s0}, {s1}] vs [{t0}, {t1}]"
            )));
        }
        if target.spacing()[a] > src.spacing()[a] * (T::one() + T::lit(1e-9)) {
            return Err(Error::InvalidParameter(format!(
                "target spacing on axis {a} is coarser than the velocity grid"
            )));
        }
    }
    let slices = v
        .slices()
        .iter()
        .map(|s| VectorField::from_fn(target, |p| s.sample(p)))
        .collect();
    TimeVaryingVelocity::new(slices)
}

#[derive(Clone, Debug)]
pub struct LevelSummary {
    pub level: usize,
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub alpha: f64,
    /// Trace entries produced by this level, the initial state included.
    pub iterations: usize,
    pub wall_time_secs: f64,
    pub initial_matching: f64,
    pub reference_matching: f64,
}

#[derive(Clone, Debug)]
pub struct ScheduleResult<T> {
    /// Result of the last level; its trace is the concatenation of all
    /// levels, each entry tagged with its level index.
    pub result: RegistrationResult<T>,
    pub levels: Vec<LevelSummary>,
}

/// The level grid: `base` itself when the spacing already matches.
fn level_grid<T: Real>(base: &ImageGrid<T>, spacing: &[f64]) -> Result<ImageGrid<T>> {
    let s: Vec<T> = spacing.iter().map(|&v| T::lit(v)).collect();
    let same = base
        .spacing()
        .iter()
        .zip(&s)
        .all(|(a, b)| (*a - *b).abs() <= T::lit(1e-9) * a.abs());
    if same {
        Ok(base.clone())
    } else {
        base.with_spacing(&s)
    }
}

/// Run all levels of `schedule`. The registration grid of each level covers
/// the target's physical box; `cfg` supplies everything but `alpha` and the
/// iteration budget.
pub fn run_schedule<T: Real>(
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    schedule: &Schedule,
    cfg: &RegistrationConfig<T>,
) -> Result<ScheduleResult<T>> {
    let base = target.grid();
    schedule.validate(base.ndim())?;
    template.grid().ensure_matches(base, "multi-resolution template vs target")?;
    let mut trace = Vec::new();
    let mut summaries = Vec::new();
    let mut velocity: Option<TimeVaryingVelocity<T>> = None;
    let mut last = None;
    for (k, level) in schedule.levels.iter().enumerate() {
        let start = Instant::now();
        let grid = level_grid(base, &level.spacing)?;
        let (tl, jl);
        let (i0, j1) = if grid.matches(base) {
            (template, target)
        } else {
            tl = resample(template, &grid);
            jl = resample(target, &grid);
            (&tl, &jl)
        };
        let mut level_cfg = cfg.clone();
        level_cfg.kernel.alpha = T::lit(level.alpha);
        level_cfg.max_iterations = level.iterations;
        let init = match velocity.take() {
            Some(v) => Some(upsample_velocity(&v, &grid)?),
            None => None,
        };
        let mut res = match register(i0, j1, &level_cfg, init) {
            Ok(r) => r,
            Err(Error::Diverged { iteration, trace: recent }) => {
                return Err(Error::Diverged {
                    iteration,
                    trace: format!("level {k}: {recent}\ncompleted levels:\n{}", trace_csv(&trace)),
                })
            }
            Err(e) => return Err(e),
        };
        for e in res.trace.iter_mut() {
            e.level = k;
        }
        trace.extend(res.trace.iter().cloned());
        summaries.push(LevelSummary {
            level: k,
            dims: grid.dims().to_vec(),
            spacing: grid.spacing().iter().map(|h| h.to_f64_lossy()).collect(),
            alpha: level.alpha,
            iterations: res.trace.len(),
            wall_time_secs: start.elapsed().as_secs_f64(),
            initial_matching: res.initial_matching.to_f64_lossy(),
            reference_matching: res.reference_matching.to_f64_lossy(),
        });
        velocity = Some(res.velocity.clone());
        last = Some(res);
    }
    let mut result = last.expect("at least one level");
    result.trace = trace;
    Ok(ScheduleResult {
        result,
        levels: summaries,
    })
}
