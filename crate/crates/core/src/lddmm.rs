//! LDDMM optimiser.
//!
//! Minimises `E(v) = R(v) + M(I(1), J) / (2 sigma^2)` over the time-varying
//! velocity `v`, where `R(v) = 1/2 int |L v(t)|^2 dt` and
//! `I(t) = I_0 o phi_{t0}`. The descent direction is the Sobolev gradient
//!
//! ```text
//! grad E(t) = v(t) + K (rho(t) grad I(t)),
//! rho(t)    = -(1 / 2 sigma^2) (dM/dI o phi_{t1}) |D phi_{t1}|,
//! ```
//!
//! i.e. the gradient with respect to `<a, b>_V = int <a(t), L^T L b(t)> dt`.
//! Finite-difference checks must pair it with that inner product
//! ([`velocity_inner`]), not with the plain L² one.
//!
//! Two ways of computing the force `rho grad I` are provided. The default,
//! [`GradientMethod::DiscreteAdjoint`], back-propagates `dM/dI(1)` through the
//! exact transpose of the semi-Lagrangian steps, so the result is the true
//! derivative of the discrete energy. [`GradientMethod::Costate`] evaluates
//! the continuous formula above literally (pullback through `phi_{t1}` times
//! its Jacobian determinant); it agrees with the adjoint as the grid and the
//! time step are refined.
//!
//! Step rule: accept if `E` decreases and grow `eps` by 5 %; otherwise reject,
//! restore `v` and halve `eps`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{backward_maps, deform_image, forward_maps, TimeVaryingVelocity};
use crate::grid::{gradient as image_gradient, jacobian_determinant, DeformationMap, ImageVolume, VectorField};
use crate::kernel::{h1_seminorm, KernelParams, SpectralKernel};
use crate::matching::{MatchResult, Matcher, MatcherKind};
use crate::scalar::Real;

pub const GROW: f64 = 1.05;
pub const SHRINK: f64 = 0.5;
/// Optimisation stops once `eps < MIN_STEP_RATIO * eps0`.
pub const MIN_STEP_RATIO: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientMethod {
    #[default]
    DiscreteAdjoint,
    Costate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig<T> {
    pub sigma: T,
    pub kernel: KernelParams<T>,
    pub time_steps: usize,
    pub epsilon0: T,
    pub max_iterations: usize,
    /// Relative energy change over an accepted step below which we stop.
    pub convergence_tol: T,
    pub matcher: MatcherKind,
    pub gradient: GradientMethod,
}

impl<T: Real> RegistrationConfig<T> {
    /// Defaults: `alpha = 0.02`, `gamma = 1`, `T = 10`, `eps0 = 0.5`,
    /// 200 iterations, tolerance `1e-4`.
    pub fn new(sigma: T, matcher: MatcherKind) -> Self {
        RegistrationConfig {
            sigma,
            kernel: KernelParams {
                alpha: T::lit(0.02),
                gamma: T::one(),
            },
            time_steps: 10,
            epsilon0: T::lit(0.5),
            max_iterations: 200,
            convergence_tol: T::lit(1e-4),
            matcher,
            gradient: GradientMethod::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(Error::InvalidParameter("sigma must be positive".into()));
        }
        if !(self.epsilon0 > T::zero()) || !self.epsilon0.is_finite() {
            return Err(Error::InvalidParameter("epsilon0 must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidParameter("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol >= T::zero()) {
            return Err(Error::InvalidParameter("convergence_tol must be non-negative".into()));
        }
        if self.time_steps < 2 {
            return Err(Error::InvalidParameter("time_steps must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy<T> {
    pub total: T,
    pub regularization: T,
    pub matching: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry<T> {
    pub level: usize,
    pub iteration: usize,
    pub energy: T,
    pub regularization: T,
    pub matching: T,
    /// `None` when the normalisation is degenerate (`M_0 == M_ref`).
    pub normalized_matching: Option<T>,
    pub epsilon: T,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    pub velocity: TimeVaryingVelocity<T>,
    /// `phi_{10}`: pullback used to deform the template, `I(1) = I_0 o phi_{10}`.
    pub forward_map: DeformationMap<T>,
    /// `phi_{01}`: moves template points into target space.
    pub inverse_map: DeformationMap<T>,
    pub trace: Vec<TraceEntry<T>>,
    pub deformed_template: ImageVolume<T>,
    /// `M(I_0, J)` on the registration grid.
    pub initial_matching: T,
    /// `M(J, J)`.
    pub reference_matching: T,
}

impl<T: Real> RegistrationResult<T> {
    pub fn final_entry(&self) -> &TraceEntry<T> {
        self.trace
            .iter()
            .rev()
            .find(|e| e.accepted)
            .expect("trace starts with an accepted entry")
    }
}

/// `(M_t - M_ref) / (M_0 - M_ref)`.
pub fn normalized_matching<T: Real>(m_t: T, m_0: T, m_ref: T) -> Result<T> {
    if m_0 == m_ref {
        return Err(Error::Degenerate(
            "initial matching equals the reference; nothing to normalise".into(),
        ));
    }
    Ok((m_t - m_ref) / (m_0 - m_ref))
}

/// `<a, b>_V = sum_j w_j <a_j, L^T L b_j>` with trapezoidal weights.
pub fn velocity_inner<T: Real>(
    kernel: &SpectralKernel<T>,
    a: &TimeVaryingVelocity<T>,
    b: &TimeVaryingVelocity<T>,
) -> Result<T> {
    let mut acc = T::zero();
    for j in 0..a.time_steps() {
        let lb = kernel.apply_ldag_l(b.slice(j))?;
        acc += a.quadrature_weight(j) * a.slice(j).dot(&lb);
    }
    Ok(acc)
}

/// Time-integrated H¹ seminorm, `sqrt(sum_j w_j |v_j|_{H1}^2)`.
pub fn velocity_h1<T: Real>(v: &TimeVaryingVelocity<T>) -> T {
    (0..v.time_steps())
        .map(|j| {
            let h = h1_seminorm(v.slice(j));
            v.quadrature_weight(j) * h * h
        })
        .sum::<T>()
        .sqrt()
}

/// Everything that stays fixed while `v` changes.
pub struct Problem<'a, T: Real> {
    pub template: &'a ImageVolume<T>,
    pub target: &'a ImageVolume<T>,
    pub kernel: SpectralKernel<T>,
    pub matcher: Matcher<T>,
    pub sigma: T,
    pub time_steps: usize,
    pub method: GradientMethod,
}

pub struct Evaluation<T> {
    pub energy: Energy<T>,
    pub deformed: ImageVolume<T>,
    pub matching: MatchResult<T>,
}

impl<'a, T: Real> Problem<'a, T> {
    /// The registration grid is the target grid; the template is sampled in
    /// physical coordinates and may live on any grid.
    pub fn new(template: &'a ImageVolume<T>, target: &'a ImageVolume<T>, cfg: &RegistrationConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let kernel = SpectralKernel::new(target.grid(), cfg.kernel)?;
        let matcher = Matcher::prepare(cfg.matcher, template, target)?;
        Ok(Problem {
            template,
            target,
            kernel,
            matcher,
            sigma: cfg.sigma,
            time_steps: cfg.time_steps,
            method: cfg.gradient,
        })
    }

    fn matching_weight(&self) -> T {
        T::one() / (T::lit(2.0) * self.sigma * self.sigma)
    }

    fn check_velocity(&self, v: &TimeVaryingVelocity<T>) -> Result<()> {
        self.target.grid().ensure_matches(v.grid(), "velocity vs registration grid")
    }

    pub fn regularization(&self, v: &TimeVaryingVelocity<T>) -> Result<T> {
        Ok(T::lit(0.5) * velocity_inner(&self.kernel, v, v)?)
    }

    fn evaluate_with(&self, v: &TimeVaryingVelocity<T>, phi_10: &DeformationMap<T>) -> Result<Evaluation<T>> {
        let deformed = deform_image(self.template, phi_10);
        let matching = self.matcher.evaluate(&deformed, self.target)?;
        let regularization = self.regularization(v)?;
        let total = regularization + matching.value * self.matching_weight();
        Ok(Evaluation {
            energy: Energy {
                total,
                regularization,
                matching: matching.value,
            },
            deformed,
            matching,
        })
    }

    pub fn evaluate(&self, v: &TimeVaryingVelocity<T>) -> Result<Evaluation<T>> {
        self.check_velocity(v)?;
        let phi_10 = crate::flow::integrate_backward(v, v.time_steps() - 1)?;
        self.evaluate_with(v, &phi_10)
    }

    pub fn energy(&self, v: &TimeVaryingVelocity<T>) -> Result<Energy<T>> {
        Ok(self.evaluate(v)?.energy)
    }

    /// Energy and Sobolev gradient at `v`.
    pub fn gradient(&self, v: &TimeVaryingVelocity<T>) -> Result<(Evaluation<T>, TimeVaryingVelocity<T>)> {
        self.check_velocity(v)?;
        let (eval, forces) = match self.method {
            GradientMethod::DiscreteAdjoint => self.adjoint_forces(v)?,
            GradientMethod::Costate => self.costate_forces(v)?,
        };
        let slices = forces
            .into_iter()
            .enumerate()
            .map(|(j, force)| {
                let mut out = self.kernel.apply_k(&force)?;
                out.axpy(T::one(), v.slice(j));
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((eval, TimeVaryingVelocity::new(slices)?))
    }

    /// `rho(t_j) grad I(t_j)` from the continuous costate formula.
    fn costate_forces(&self, v: &TimeVaryingVelocity<T>) -> Result<(Evaluation<T>, Vec<VectorField<T>>)> {
        let back = backward_maps(v);
        let fwd = forward_maps(v);
        let eval = self.evaluate_with(v, back.last().expect("T >= 2"))?;
        let dm = &eval.matching.gradient;
        let weight = -self.matching_weight();
        let grid = self.target.grid();
        let nd = grid.ndim();
        let forces = (0..v.time_steps())
            .map(|j| {
                let image_t = deform_image(self.template, &back[j]);
                let grad_i = image_gradient(&image_t);
                let det = jacobian_determinant(&fwd[j]);
                let rho: Vec<T> = (0..grid.len())
                    .into_par_iter()
                    .map(|idx| weight * dm.sample(&fwd[j].at_voxel(idx)) * det.data()[idx])
                    .collect();
                VectorField::from_raw(
                    grid.clone(),
                    (0..nd)
                        .map(|c| grad_i.component(c).iter().zip(&rho).map(|(&g, &r)| g * r).collect())
                        .collect(),
                )
            })
            .collect();
        Ok((eval, forces))
    }

    /// L² force densities from reverse-mode differentiation of the discrete
    /// flow `u_{k+1}(x) = -dt w_k(x) + u_k(x - dt w_k(x))`,
    /// `I(1)(x) = I_0(x + u_{T-1}(x))`, `w_k = (v_k + v_{k+1}) / 2`.
    fn adjoint_forces(&self, v: &TimeVaryingVelocity<T>) -> Result<(Evaluation<T>, Vec<VectorField<T>>)> {
        let back = backward_maps(v);
        let phi_10 = back.last().expect("T >= 2");
        let eval = self.evaluate_with(v, phi_10)?;
        let grid = self.target.grid();
        let nd = grid.ndim();
        let n = grid.len();
        let steps = v.time_steps();
        let dt = v.dt();
        let dvol = grid.voxel_volume();
        let dm = eval.matching.gradient.data();

        // lambda = dM/du_{T-1}, one plane per component
        let seed: Vec<[T; 3]> = (0..n)
            .into_par_iter()
            .map(|x| {
                let g = self.template.sample_gradient(&phi_10.at_voxel(x));
                let s = dm[x] * dvol;
                [g[0] * s, g[1] * s, g[2] * s]
            })
            .collect();
        let mut lambda: Vec<Vec<T>> = (0..nd).map(|c| seed.iter().map(|l| l[c]).collect()).collect();

        // dM/dw_k for every step
        let mut dw: Vec<Vec<Vec<T>>> = vec![Vec::new(); steps - 1];
        for k in (0..steps - 1).rev() {
            let w = v.step_velocity(k);
            let u = back[k].displacement();
            let departure: Vec<[T; 3]> = (0..n)
                .into_par_iter()
                .map(|x| {
                    let mut y = grid.point_of(x);
                    let wx = w.at(x);
                    for a in 0..nd {
                        y[a] -= dt * wx[a];
                    }
                    y
                })
                .collect();
            let step: Vec<[T; 3]> = (0..n)
                .into_par_iter()
                .map(|x| {
                    let jac = u.sample_jacobian(&departure[x]);
                    let mut out = [T::zero(); 3];
                    for c in 0..nd {
                        let mut acc = lambda[c][x];
                        for a in 0..nd {
                            acc += jac[a][c] * lambda[a][x];
                        }
                        out[c] = -dt * acc;
                    }
                    out
                })
                .collect();
            dw[k] = (0..nd).map(|c| step.iter().map(|s| s[c]).collect()).collect();
            if k > 0 {
                // transpose of the interpolation u_k(y): scatter back onto nodes
                let mut next = vec![vec![T::zero(); n]; nd];
                for (x, y) in departure.iter().enumerate() {
                    let st = grid.stencil(y);
                    for c in 0..nd {
                        st.scatter(lambda[c][x], &mut next[c]);
                    }
                }
                lambda = next;
            }
        }

        let weight = self.matching_weight();
        let half = T::lit(0.5);
        let forces = (0..steps)
            .map(|j| {
                let scale = weight / (v.quadrature_weight(j) * dvol);
                let comps = (0..nd)
                    .map(|c| {
                        (0..n)
                            .map(|x| {
                                let mut d = T::zero();
                                if j > 0 {
                                    d += dw[j - 1][c][x];
                                }
                                if j + 1 < steps {
                                    d += dw[j][c][x];
                                }
                                half * d * scale
                            })
                            .collect()
                    })
                    .collect();
                VectorField::from_raw(grid.clone(), comps)
            })
            .collect();
        Ok((eval, forces))
    }
}

/// `energy(v, I0, J1, cfg)`.
pub fn energy<T: Real>(
    v: &TimeVaryingVelocity<T>,
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    cfg: &RegistrationConfig<T>,
) -> Result<Energy<T>> {
    Problem::new(template, target, cfg)?.energy(v)
}

/// `gradient(v, I0, J1, cfg)`: the Sobolev gradient of [`energy`].
pub fn gradient<T: Real>(
    v: &TimeVaryingVelocity<T>,
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    cfg: &RegistrationConfig<T>,
) -> Result<TimeVaryingVelocity<T>> {
    Ok(Problem::new(template, target, cfg)?.gradient(v)?.1)
}

fn diagnostic<T: Real>(trace: &[TraceEntry<T>]) -> String {
    let mut s = String::new();
    for e in trace.iter().rev().take(5).rev() {
        let _ = write!(
            s,
            "[it {} E {} R {} M {} eps {} {}] ",
            e.iteration,
            e.energy,
            e.regularization,
            e.matching,
            e.epsilon,
            if e.accepted { "accepted" } else { "rejected" }
        );
    }
    s
}

/// Adaptive-step gradient descent from `v_init` (zero when `None`).
pub fn register<T: Real>(
    template: &ImageVolume<T>,
    target: &ImageVolume<T>,
    cfg: &RegistrationConfig<T>,
    v_init: Option<TimeVaryingVelocity<T>>,
) -> Result<RegistrationResult<T>> {
    let problem = Problem::new(template, target, cfg)?;
    let grid = target.grid();
    let mut v = match v_init {
        Some(v) => {
            if v.time_steps() != cfg.time_steps {
                return Err(Error::InvalidParameter(format!(
                    "initial velocity has {} time steps, config expects {}",
                    v.time_steps(),
                    cfg.time_steps
                )));
            }
            grid.ensure_matches(v.grid(), "initial velocity")?;
            v
        }
        None => TimeVaryingVelocity::zeros(grid, cfg.time_steps)?,
    };

    let identity = DeformationMap::identity(grid);
    let initial_matching = problem.matcher.value(&deform_image(template, &identity), target)?;
    let reference_matching = problem.matcher.value(target, target)?;
    let normalize = |m: T| normalized_matching(m, initial_matching, reference_matching).ok();

    let (mut eval, mut grad) = problem.gradient(&v)?;
    let mut trace = vec![TraceEntry {
        level: 0,
        iteration: 0,
        energy: eval.energy.total,
        regularization: eval.energy.regularization,
        matching: eval.energy.matching,
        normalized_matching: normalize(eval.energy.matching),
        epsilon: cfg.epsilon0,
        accepted: true,
    }];
    if !eval.energy.total.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            trace: diagnostic(&trace),
        });
    }

    let mut eps = cfg.epsilon0;
    let min_eps = cfg.epsilon0 * T::lit(MIN_STEP_RATIO);
    for iteration in 1..cfg.max_iterations {
        if grad.is_zero() {
            break;
        }
        let mut trial = v.clone();
        trial.axpy(-eps, &grad);
        let trial_energy = problem.energy(&trial)?;
        if !trial_energy.total.is_finite() {
            trace.push(TraceEntry {
                level: 0,
                iteration,
                energy: trial_energy.total,
                regularization: trial_energy.regularization,
                matching: trial_energy.matching,
                normalized_matching: None,
                epsilon: eps,
                accepted: false,
            });
            return Err(Error::Diverged {
                iteration,
                trace: diagnostic(&trace),
            });
        }
        let previous = eval.energy.total;
        let accepted = trial_energy.total < previous;
        trace.push(TraceEntry {
            level: 0,
            iteration,
            energy: trial_energy.total,
            regularization: trial_energy.regularization,
            matching: trial_energy.matching,
            normalized_matching: normalize(trial_energy.matching),
            epsilon: eps,
            accepted,
        });
        if accepted {
            v = trial;
            let (e, g) = problem.gradient(&v)?;
            eval = e;
            grad = g;
            eps *= T::lit(GROW);
            let change = (previous - eval.energy.total).abs() / previous.abs().max(T::min_positive_value());
            if change < cfg.convergence_tol {
                break;
            }
        } else {
            eps *= T::lit(SHRINK);
            if eps < min_eps {
                break;
            }
        }
    }

    let back = backward_maps(&v);
    let forward_map = back.last().expect("T >= 2").clone();
    let inverse_map = forward_maps(&v).swap_remove(0);
    Ok(RegistrationResult {
        velocity: v,
        forward_map,
        inverse_map,
        trace,
        deformed_template: eval.deformed,
        initial_matching,
        reference_matching,
    })
}

/// Energy trace as CSV:
/// `level,iteration,E,R,M,normalized_M,epsilon,accepted`.
/// A degenerate normalisation is written as `degenerate`.
pub fn trace_csv<T: Real>(trace: &[TraceEntry<T>]) -> String {
    let mut s = String::from("level,iteration,E,R,M,normalized_M,epsilon,accepted\n");
    for e in trace {
        let norm = match e.normalized_matching {
            Some(n) => format!("{n:e}"),
            None => "degenerate".to_string(),
        };
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{},{:e},{}",
            e.level, e.iteration, e.energy, e.regularization, e.matching, norm, e.epsilon, e.accepted
        );
    }
    s
}
