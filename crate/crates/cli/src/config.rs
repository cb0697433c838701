//! The job configuration document.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lddmm::lddmm::GradientMethod;
use lddmm::matching::MatcherKind;
use lddmm::{ImageGrid, KernelParams, RegistrationConfig, Schedule};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherChoice {
    Ssd,
    Mi,
    /// Binarize both images, then match with SSD.
    Mask,
}

impl std::str::FromStr for MatcherChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ssd" => Ok(MatcherChoice::Ssd),
            "mi" => Ok(MatcherChoice::Mi),
            "mask" => Ok(MatcherChoice::Mask),
            other => Err(format!("unknown matcher {other:?}; expected ssd, mi or mask")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientChoice {
    Adjoint,
    Costate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineConfig {
    pub enabled: bool,
    pub bins: usize,
    pub max_iterations: usize,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            enabled: true,
            bins: 32,
            max_iterations: 200,
        }
    }
}

/// Everything a registration job needs besides its file paths. Only `sigma`
/// is required; a missing `schedule` means one level on the target grid
/// with `alpha` and `max_iterations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub sigma: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::time_steps")]
    pub time_steps: usize,
    #[serde(default = "defaults::epsilon0")]
    pub epsilon0: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "defaults::convergence_tol")]
    pub convergence_tol: f64,
    #[serde(default = "defaults::gradient")]
    pub gradient: GradientChoice,
    #[serde(default = "defaults::matcher")]
    pub matcher: MatcherChoice,
    /// MI histogram bins for the deformable stage.
    #[serde(default = "defaults::bins")]
    pub bins: usize,
    /// One threshold for both images, or `[template, target]`.
    #[serde(default)]
    pub mask_threshold: Option<Vec<f64>>,
    #[serde(default)]
    pub affine: AffineConfig,
    #[serde(default)]
    pub schedule: Option<Schedule>,
}

mod defaults {
    use super::{GradientChoice, MatcherChoice};

    pub fn alpha() -> f64 {
        0.02
    }
    pub fn gamma() -> f64 {
        1.0
    }
    pub fn time_steps() -> usize {
        10
    }
    pub fn epsilon0() -> f64 {
        0.5
    }
    pub fn max_iterations() -> usize {
        200
    }
    pub fn convergence_tol() -> f64 {
        1e-4
    }
    pub fn gradient() -> GradientChoice {
        GradientChoice::Adjoint
    }
    pub fn matcher() -> MatcherChoice {
        MatcherChoice::Mi
    }
    pub fn bins() -> usize {
        32
    }
}

impl JobConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        serde_json::from_value(serde_json::json!({ "sigma": sigma })).expect("defaults parse")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn registration(&self) -> Result<RegistrationConfig> {
        let matcher = match self.matcher {
            MatcherChoice::Mi => MatcherKind::MutualInformation { bins: self.bins },
            MatcherChoice::Ssd | MatcherChoice::Mask => MatcherKind::Ssd,
        };
        let mut cfg = RegistrationConfig::new(self.sigma, matcher);
        cfg.kernel = KernelParams {
            alpha: self.alpha,
            gamma: self.gamma,
        };
        cfg.time_steps = self.time_steps;
        cfg.epsilon0 = self.epsilon0;
        cfg.max_iterations = self.max_iterations;
        cfg.convergence_tol = self.convergence_tol;
        cfg.gradient = match self.gradient {
            GradientChoice::Adjoint => GradientMethod::DiscreteAdjoint,
            GradientChoice::Costate => GradientMethod::Costate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The explicit schedule, or a single level on `grid`.
    pub fn schedule_for(&self, grid: &ImageGrid) -> Schedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| Schedule::single(grid, self.alpha, self.max_iterations))
    }

    /// `(template, target)` thresholds in mask mode.
    pub fn thresholds(&self) -> Result<Option<(f64, f64)>> {
        if self.matcher != MatcherChoice::Mask {
            return Ok(None);
        }
        match self.mask_threshold.as_deref() {
            Some([t]) => Ok(Some((*t, *t))),
            Some([a, b]) => Ok(Some((*a, *b))),
            Some(_) => bail!("mask_threshold takes one or two values"),
            None => bail!("matcher \"mask\" needs mask_threshold"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_is_required() {
        assert!(serde_json::from_str::<JobConfig>("{}").is_err());
        let c: JobConfig = serde_json::from_str(r#"{"sigma": 0.1}"#).unwrap();
        assert_eq!(c, JobConfig::with_sigma(0.1));
        assert_eq!(c.matcher, MatcherChoice::Mi);
        assert!(c.affine.enabled);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<JobConfig>(r#"{"sigma": 0.1, "sigmma": 2}"#).is_err());
    }

    #[test]
    fn schedule_round_trips_through_the_document() {
        let text = r#"{"sigma": 0.05, "matcher": "ssd",
            "schedule": [{"spacing": [2.0, 2.0], "alpha": 0.05, "iterations": 10},
                         {"spacing": [1.0, 1.0], "alpha": 0.02, "iterations": 5}]}"#;
        let c: JobConfig = serde_json::from_str(text).unwrap();
        let back: JobConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.schedule.unwrap().levels.len(), 2);
    }

    #[test]
    fn mask_needs_thresholds() {
        let mut c = JobConfig::with_sigma(1.0);
        c.matcher = MatcherChoice::Mask;
        assert!(c.thresholds().is_err());
        c.mask_threshold = Some(vec![0.5]);
        assert_eq!(c.thresholds().unwrap(), Some((0.5, 0.5)));
        c.mask_threshold = Some(vec![0.2, 0.7]);
        assert_eq!(c.thresholds().unwrap(), Some((0.2, 0.7)));
    }
}
