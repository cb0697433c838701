//! Matching terms `M(I, J)` and their per-voxel derivatives `dM/dI`.
//!
//! Derivative images are densities: `sum_x grad(x) * dI(x) * dV` is the first
//! order change of `M`, for every matcher and any voxel spacing.
//!
//! Mutual information follows Mattes: the joint distribution is a Parzen
//! estimate with a cubic B-spline window on the template axis and a
//! zero-order (nearest bin) window on the target axis. Both axes have `B`
//! bins of equal width spanning the intensity range padded by one bin on each
//! side, so a sample's cubic window never leaves the histogram and the
//! target marginal does not depend on the template.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ImageVolume;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T> {
    pub value: T,
    pub gradient: ImageVolume<T>,
}

/// Sum of squared differences, `sum (I - J)^2 dV`; derivative `2 (I - J)`.
pub fn ssd<T: Real>(deformed: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<MatchResult<T>> {
    deformed.grid().ensure_matches(target.grid(), "ssd")?;
    let diff: Vec<T> = deformed
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| a - b)
        .collect();
    let value = diff.iter().map(|&d| d * d).sum::<T>() * deformed.grid().voxel_volume();
    let two = T::lit(2.0);
    let gradient = ImageVolume::from_raw(
        deformed.grid().clone(),
        diff.into_iter().map(|d| two * d).collect(),
    );
    Ok(MatchResult { value, gradient })
}

/// Cubic B-spline `beta3`.
#[inline]
pub fn bspline3<T: Real>(t: T) -> T {
    let a = t.abs();
    if a < T::one() {
        T::lit(2.0 / 3.0) - a * a + T::lit(0.5) * a * a * a
    } else if a < T::lit(2.0) {
        let b = T::lit(2.0) - a;
        b * b * b / T::lit(6.0)
    } else {
        T::zero()
    }
}

#[inline]
pub fn bspline3_derivative<T: Real>(t: T) -> T {
    let a = t.abs();
    let d = if a < T::one() {
        -T::lit(2.0) * a + T::lit(1.5) * a * a
    } else if a < T::lit(2.0) {
        let b = T::lit(2.0) - a;
        -T::lit(0.5) * b * b
    } else {
        T::zero()
    };
    if t < T::zero() {
        -d
    } else {
        d
    }
}

/// One histogram axis: `B` bins, continuous bin coordinate
/// `c = (value - min) / width + 1` with `width = (max - min) / (B - 3)`, so
/// `[min, max]` maps onto `[1, B - 2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinAxis<T> {
    pub bins: usize,
    pub min: T,
    pub width: T,
}

impl<T: Real> BinAxis<T> {
    /// `None` when the range is empty (constant image).
    pub fn from_range(bins: usize, min: T, max: T) -> Option<Self> {
        if !(max > min) {
            return None;
        }
        Some(BinAxis {
            bins,
            min,
            width: (max - min) / T::from_usize_lossy(bins - 3),
        })
    }

    pub fn from_image(bins: usize, img: &ImageVolume<T>) -> Option<Self> {
        Self::from_range(bins, img.min(), img.max())
    }

    /// Continuous bin coordinate clamped to `[1, B - 2]`, and whether the
    /// clamp was active.
    #[inline]
    pub fn coordinate(&self, value: T) -> (T, bool) {
        let c = (value - self.min) / self.width + T::one();
        let hi = T::from_usize_lossy(self.bins - 2);
        if c < T::one() {
            (T::one(), true)
        } else if c > hi {
            (hi, true)
        } else {
            (c, false)
        }
    }

    /// Zero-order window: nearest bin centre, ties go to the lower bin.
    #[inline]
    pub fn nearest_bin(&self, value: T) -> usize {
        let (c, _) = self.coordinate(value);
        (c - T::lit(0.5)).ceil().to_usize().unwrap_or(1)
    }
}

/// Parzen joint distribution, `joint[eta * B + xi]` (eta: template, xi: target).
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram<T> {
    pub bins: usize,
    pub joint: Vec<T>,
    pub template_marginal: Vec<T>,
    pub target_marginal: Vec<T>,
    /// Constant template or target; MI is taken to be zero.
    pub degenerate: bool,
}

impl<T: Real> JointHistogram<T> {
    pub fn p(&self, eta: usize, xi: usize) -> T {
        self.joint[eta * self.bins + xi]
    }
}

/// Mattes mutual information with frozen bin axes.
#[derive(Clone, Debug, PartialEq)]
pub struct MattesMi<T> {
    pub bins: usize,
    /// `None` flags a degenerate (constant) image.
    pub template_axis: Option<BinAxis<T>>,
    pub target_axis: Option<BinAxis<T>>,
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 4 {
        return Err(Error::InvalidParameter(format!("need at least 4 bins, got {bins}")));
    }
    Ok(())
}

impl<T: Real> MattesMi<T> {
    /// Freeze bin axes from the intensity ranges of the two images.
    pub fn new(bins: usize, template: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<Self> {
        check_bins(bins)?;
        Ok(MattesMi {
            bins,
            template_axis: BinAxis::from_image(bins, template),
            target_axis: BinAxis::from_image(bins, target),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.template_axis.is_none() || self.target_axis.is_none()
    }

    pub fn histogram(&self, deformed: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<JointHistogram<T>> {
        deformed.grid().ensure_matches(target.grid(), "joint histogram")?;
        let b = self.bins;
        let (ta, ra) = match (self.template_axis, self.target_axis) {
            (Some(t), Some(r)) => (t, r),
            _ => {
                return Ok(JointHistogram {
                    bins: b,
                    joint: vec![T::zero(); b * b],
                    template_marginal: vec![T::zero(); b],
                    target_marginal: vec![T::zero(); b],
                    degenerate: true,
                })
            }
        };
        let mut joint = vec![T::zero(); b * b];
        for (&iv, &jv) in deformed.data().iter().zip(target.data()) {
            let (c, _) = ta.coordinate(iv);
            let xi = ra.nearest_bin(jv);
            let f = c.floor().to_usize().unwrap_or(1);
            for eta in f - 1..=(f + 2).min(b - 1) {
                let w = bspline3(T::from_usize_lossy(eta) - c);
                joint[eta * b + xi] += w;
            }
        }
        let n = T::from_usize_lossy(deformed.data().len());
        joint.iter_mut().for_each(|p| *p /= n);
        let template_marginal = (0..b).map(|e| (0..b).map(|x| joint[e * b + x]).sum()).collect();
        let target_marginal = (0..b).map(|x| (0..b).map(|e| joint[e * b + x]).sum()).collect();
        Ok(JointHistogram {
            bins: b,
            joint,
            template_marginal,
            target_marginal,
            degenerate: false,
        })
    }

    /// Negative mutual information and its per-voxel derivative.
    pub fn evaluate(&self, deformed: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<MatchResult<T>> {
        let hist = self.histogram(deformed, target)?;
        let grid = deformed.grid().clone();
        if hist.degenerate {
            return Ok(MatchResult {
                value: T::zero(),
                gradient: ImageVolume::zeros(&grid),
            });
        }
        let b = self.bins;
        let mut value = T::zero();
        // log p(xi | eta) = log p(eta, xi) - log p(eta), zero where p vanishes
        let mut log_cond = vec![T::zero(); b * b];
        for eta in 0..b {
            let pe = hist.template_marginal[eta];
            for xi in 0..b {
                let p = hist.joint[eta * b + xi];
                if p > T::zero() {
                    let pj = hist.target_marginal[xi];
                    value -= p * (p / (pe * pj)).ln();
                    log_cond[eta * b + xi] = (p / pe).ln();
                }
            }
        }
        let ta = self.template_axis.expect("checked above");
        let ra = self.target_axis.expect("checked above");
        let scale = T::one() / (T::from_usize_lossy(deformed.data().len()) * ta.width * grid.voxel_volume());
        let gradient: Vec<T> = deformed
            .data()
            .par_iter()
            .zip(target.data().par_iter())
            .map(|(&iv, &jv)| {
                let (c, clamped) = ta.coordinate(iv);
                if clamped {
                    return T::zero();
                }
                let xi = ra.nearest_bin(jv);
                let f = c.floor().to_usize().unwrap_or(1);
                let mut acc = T::zero();
                for eta in f - 1..=(f + 2).min(b - 1) {
                    let d = bspline3_derivative(T::from_usize_lossy(eta) - c);
                    acc += d * log_cond[eta * b + xi];
                }
                acc * scale
            })
            .collect();
        Ok(MatchResult {
            value,
            gradient: ImageVolume::from_raw(grid, gradient),
        })
    }
}

/// `build_joint_histogram` with bin axes taken from the two images.
pub fn build_joint_histogram<T: Real>(
    deformed: &ImageVolume<T>,
    target: &ImageVolume<T>,
    bins: usize,
) -> Result<JointHistogram<T>> {
    MattesMi::new(bins, deformed, target)?.histogram(deformed, target)
}

/// `mutual_information` with bin axes taken from the two images.
pub fn mutual_information<T: Real>(
    deformed: &ImageVolume<T>,
    target: &ImageVolume<T>,
    bins: usize,
) -> Result<MatchResult<T>> {
    MattesMi::new(bins, deformed, target)?.evaluate(deformed, target)
}

/// 1 where `value >= threshold`, else 0.
pub fn binarize<T: Real>(img: &ImageVolume<T>, threshold: T) -> Result<ImageVolume<T>> {
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter("threshold must be finite".into()));
    }
    Ok(img.map(|v| if v >= threshold { T::one() } else { T::zero() }))
}

/// Which matching term to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatcherKind {
    Ssd,
    MutualInformation { bins: usize },
}

/// A matching term prepared for one registration (MI bin ranges frozen).
#[derive(Clone, Debug, PartialEq)]
pub enum Matcher<T> {
    Ssd,
    MutualInformation(MattesMi<T>),
}

impl<T: Real> Matcher<T> {
    /// Template range comes from the undeformed template: interpolation never
    /// leaves it, so the frozen axis stays valid for every deformation.
    pub fn prepare(kind: MatcherKind, template: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<Self> {
        Ok(match kind {
            MatcherKind::Ssd => Matcher::Ssd,
            MatcherKind::MutualInformation { bins } => {
                Matcher::MutualInformation(MattesMi::new(bins, template, target)?)
            }
        })
    }

    pub fn evaluate(&self, deformed: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<MatchResult<T>> {
        match self {
            Matcher::Ssd => ssd(deformed, target),
            Matcher::MutualInformation(mi) => mi.evaluate(deformed, target),
        }
    }

    pub fn value(&self, deformed: &ImageVolume<T>, target: &ImageVolume<T>) -> Result<T> {
        Ok(self.evaluate(deformed, target)?.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ImageGrid;

    fn g(n: usize) -> ImageGrid<f64> {
        ImageGrid::with_dims(&[n, n]).unwrap()
    }

    #[test]
    fn bspline_partition_of_unity() {
        for k in 0..50 {
            let c = 1.0 + k as f64 * 0.0731;
            let s: f64 = (0..8).map(|e| bspline3(e as f64 - c)).sum();
            let d: f64 = (0..8).map(|e| bspline3_derivative(e as f64 - c)).sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!(d.abs() < 1e-14);
        }
    }

    #[test]
    fn bspline_derivative_matches_difference() {
        for k in -40..40 {
            let t = k as f64 * 0.0513 + 0.001;
            let fd = (bspline3(t + 1e-6) - bspline3(t - 1e-6)) / 2e-6;
            assert!((fd - bspline3_derivative(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn ssd_values() {
        let a = ImageVolume::filled(&g(4), 1.0);
        let b = ImageVolume::filled(&g(4), 3.0);
        let r = ssd(&a, &a).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.data().iter().all(|v| *v == 0.0));
        assert_eq!(ssd(&a, &b).unwrap().value, 4.0 * 16.0);
        assert!(ssd(&a, &ImageVolume::filled(&g(5), 0.0)).is_err());
    }

    #[test]
    fn constant_template_is_degenerate() {
        let c = ImageVolume::filled(&g(6), 2.0);
        let t = ImageVolume::from_fn(&g(6), |p| p[0]);
        assert!(build_joint_histogram(&c, &t, 8).unwrap().degenerate);
        assert!(build_joint_histogram(&t, &c, 8).unwrap().degenerate);
        let r = mutual_information(&c, &t, 8).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.data().iter().all(|v| *v == 0.0));
        assert!(mutual_information(&t, &t, 3).is_err());
    }

    #[test]
    fn nearest_bin_ties_go_low() {
        let ax = BinAxis::from_range(8, 0.0, 5.0).unwrap();
        assert_eq!(ax.width, 1.0);
        assert_eq!(ax.nearest_bin(0.0), 1);
        assert_eq!(ax.nearest_bin(0.5), 1);
        assert_eq!(ax.nearest_bin(0.51), 2);
        assert_eq!(ax.nearest_bin(5.0), 6);
    }

    #[test]
    fn binarize_thresholds() {
        let img = ImageVolume::from_fn(&g(4), |p| p[0]);
        assert!(binarize(&img, 10.0).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(binarize(&img, 0.0).unwrap().data().iter().all(|v| *v == 1.0));
        let m = binarize(&img, 2.0).unwrap();
        assert_eq!(m.get([1, 0, 0]), 0.0);
        assert_eq!(m.get([2, 0, 0]), 1.0);
        assert!(binarize(&img, f64::NAN).is_err());
    }
}
