//! Synthetic images, velocities and landmark pairs with known ground truth.
//!
//! Shapes are placed in coordinates normalised to `[-1, 1]` over the grid
//! (`u = (x - center) / half_extent`) so the same phantom can be rendered at
//! any resolution. Edges are smoothed over about one voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{deform_image, trace_map, trace_points, TimeVaryingVelocity};
use crate::grid::{DeformationMap, ImageGrid, ImageVolume, Point, VectorField};
use crate::scalar::Real;
use crate::validation::{Landmark, LandmarkSet};

/// Maps between physical and normalised coordinates of a grid.
#[derive(Clone, Copy, Debug)]
pub struct Frame<T> {
    pub ndim: usize,
    pub center: Point<T>,
    pub half: [T; 3],
    /// Smallest spacing, used as the edge width.
    pub edge: T,
}

impl<T: Real> Frame<T> {
    pub fn of(grid: &ImageGrid<T>) -> Self {
        let n = grid.ndim();
        let extent = grid.extent();
        let mut half = [T::one(); 3];
        for a in 0..n {
            half[a] = T::lit(0.5) * extent[a];
        }
        let edge = grid.spacing().iter().copied().fold(T::infinity(), T::min);
        Frame {
            ndim: n,
            center: grid.center(),
            half,
            edge,
        }
    }

    pub fn normalised(&self, p: &Point<T>) -> Point<T> {
        let mut u = [T::zero(); 3];
        for a in 0..self.ndim {
            u[a] = (p[a] - self.center[a]) / self.half[a];
        }
        u
    }

    pub fn physical(&self, u: &[T]) -> Vec<T> {
        (0..self.ndim).map(|a| self.center[a] + self.half[a] * u[a]).collect()
    }
}

/// `1` well inside (`d < 0`), `0` well outside, `1/2` on the boundary.
fn smooth_inside<T: Real>(signed_distance: T, width: T) -> T {
    T::lit(0.5) * (T::one() - (signed_distance / width).tanh())
}

/// Approximate signed distance to an axis-aligned ellipsoid (physical units).
fn ellipsoid_distance<T: Real>(frame: &Frame<T>, p: &Point<T>, center: &[T], radii: &[T]) -> T {
    let mut q = T::zero();
    let mut rmin = T::infinity();
    for a in 0..frame.ndim {
        let r = radii[a] * frame.half[a];
        let d = (p[a] - (frame.center[a] + center[a] * frame.half[a])) / r;
        q += d * d;
        rmin = rmin.min(r);
    }
    (q.sqrt() - T::one()) * rmin
}

#[derive(Clone, Debug)]
pub struct Blob<T> {
    /// Physical centre.
    pub center: Vec<T>,
    /// Physical standard deviation.
    pub sigma: T,
    pub amplitude: T,
}

pub fn gaussian_blobs<T: Real>(grid: &ImageGrid<T>, blobs: &[Blob<T>]) -> ImageVolume<T> {
    let n = grid.ndim();
    ImageVolume::from_fn(grid, |p| {
        blobs
            .iter()
            .map(|b| {
                let r2: T = (0..n).map(|a| (p[a] - b.center[a]) * (p[a] - b.center[a])).sum();
                b.amplitude * (-r2 / (T::lit(2.0) * b.sigma * b.sigma)).exp()
            })
            .sum()
    })
}

/// One Gaussian blob of standard deviation `sigma_vox` voxels at `center_vox`
/// (continuous voxel index).
pub fn blob<T: Real>(grid: &ImageGrid<T>, center_vox: &[T], sigma_vox: T) -> ImageVolume<T> {
    let h = grid.spacing()[0];
    let center = (0..grid.ndim())
        .map(|a| grid.origin()[a] + center_vox[a] * grid.spacing()[a])
        .collect();
    gaussian_blobs(
        grid,
        &[Blob {
            center,
            sigma: sigma_vox * h,
            amplitude: T::one(),
        }],
    )
}

/// A thick circular arc with a gap facing +x, extruded along z in 3D.
pub fn c_shape<T: Real>(grid: &ImageGrid<T>, radius: T, thickness: T, gap: T) -> ImageVolume<T> {
    let frame = Frame::of(grid);
    let scale = frame.half[0].min(frame.half[1]);
    ImageVolume::from_fn(grid, |p| {
        let (dx, dy) = (p[0] - frame.center[0], p[1] - frame.center[1]);
        let r = (dx * dx + dy * dy).sqrt();
        let ring = (r - radius * scale).abs() - T::lit(0.5) * thickness * scale;
        let angle = dy.atan2(dx).abs();
        let arc = (T::lit(0.5) * gap - angle) * r.max(frame.edge);
        smooth_inside(ring.max(arc), frame.edge)
    })
}

/// Points on the centre line of [`c_shape`]: the back of the arc, its top
/// and bottom, and both tips.
pub fn c_shape_landmarks<T: Real>(grid: &ImageGrid<T>, radius: T, gap: T) -> Result<LandmarkSet<T>> {
    let frame = Frame::of(grid);
    let r = radius * frame.half[0].min(frame.half[1]);
    let tip = T::lit(0.5) * gap + T::lit(0.25);
    let pi = T::PI();
    let angles = [
        ("back", pi),
        ("top", T::lit(0.5) * pi),
        ("bottom", -T::lit(0.5) * pi),
        ("tip_top", tip),
        ("tip_bottom", -tip),
    ];
    let points = angles
        .iter()
        .map(|(label, a)| {
            let mut p = vec![frame.center[0] + r * a.cos(), frame.center[1] + r * a.sin()];
            if frame.ndim == 3 {
                p.push(frame.center[2]);
            }
            Landmark {
                label: label.to_string(),
                point: p,
            }
        })
        .collect();
    LandmarkSet::new(frame.ndim, points)
}

struct Feature {
    center: [f64; 3],
    radii: [f64; 3],
    contrast: f64,
}

const BODY: Feature = Feature {
    center: [0.02, -0.03, 0.0],
    radii: [0.72, 0.6, 0.55],
    contrast: 1.0,
};

const FEATURES: [Feature; 4] = [
    Feature {
        center: [-0.35, 0.2, 0.1],
        radii: [0.18, 0.18, 0.2],
        contrast: 0.8,
    },
    Feature {
        center: [0.3, -0.25, -0.12],
        radii: [0.15, 0.13, 0.15],
        contrast: -0.7,
    },
    Feature {
        center: [0.22, 0.3, 0.15],
        radii: [0.22, 0.09, 0.12],
        contrast: 0.4,
    },
    Feature {
        center: [-0.2, -0.32, 0.0],
        radii: [0.1, 0.16, 0.1],
        contrast: 0.55,
    },
];

/// Asymmetric "organ" phantom: an ellipsoidal body on a zero background with
/// four inner structures of distinct intensity.
pub fn structured<T: Real>(grid: &ImageGrid<T>) -> ImageVolume<T> {
    Structured::default().render(grid)
}

/// Parameters of the [`structured`] phantom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Structured<T> {
    /// Shrink factor about the grid centre, in `(0, 1]`.
    pub size: T,
    /// Amplitude of a smooth intensity modulation inside the body. Zero gives
    /// piecewise-constant regions.
    pub texture: T,
}

impl<T: Real> Default for Structured<T> {
    fn default() -> Self {
        Structured {
            size: T::one(),
            texture: T::zero(),
        }
    }
}

fn scaled_frame<T: Real>(grid: &ImageGrid<T>, size: T) -> Frame<T> {
    let mut frame = Frame::of(grid);
    for h in frame.half.iter_mut() {
        *h *= size;
    }
    frame
}

impl<T: Real> Structured<T> {
    pub fn render(&self, grid: &ImageGrid<T>) -> ImageVolume<T> {
        let frame = scaled_frame(grid, self.size);
        let lit3 = |v: [f64; 3]| [T::lit(v[0]), T::lit(v[1]), T::lit(v[2])];
        let tau = T::TAU();
        ImageVolume::from_fn(grid, |p| {
            let body = smooth_inside(ellipsoid_distance(&frame, p, &lit3(BODY.center), &lit3(BODY.radii)), frame.edge);
            let mut v = T::lit(BODY.contrast) * body;
            for f in &FEATURES {
                let d = ellipsoid_distance(&frame, p, &lit3(f.center), &lit3(f.radii));
                v += T::lit(f.contrast) * smooth_inside(d, frame.edge);
            }
            if self.texture != T::zero() {
                let u = frame.normalised(p);
                let wave = (tau * (T::lit(0.8) * u[0] + T::lit(0.5) * u[1] + T::lit(0.3) * u[2])).sin()
                    + T::lit(0.6) * (tau * (T::lit(-0.45) * u[0] + T::lit(0.9) * u[1] - T::lit(0.2) * u[2])).cos();
                v += self.texture * body * wave;
            }
            v
        })
    }

    pub fn landmarks(&self, grid: &ImageGrid<T>) -> Result<LandmarkSet<T>> {
        let frame = scaled_frame(grid, self.size);
        let n = grid.ndim();
        let mut points = Vec::new();
        for (k, f) in FEATURES.iter().enumerate() {
            let u: Vec<T> = f.center.iter().map(|&c| T::lit(c)).collect();
            points.push(Landmark {
                label: format!("feature{k}"),
                point: frame.physical(&u),
            });
        }
        for a in 0..n {
            for (side, s) in [("lo", -1.0), ("hi", 1.0)] {
                let mut u: Vec<T> = BODY.center.iter().map(|&c| T::lit(c)).collect();
                u[a] += T::lit(s * BODY.radii[a]);
                points.push(Landmark {
                    label: format!("body_{}{}", ["x", "y", "z"][a], side),
                    point: frame.physical(&u),
                });
            }
        }
        LandmarkSet::new(n, points)
    }
}

/// Feature centres and body extremities of [`structured`].
pub fn structured_landmarks<T: Real>(grid: &ImageGrid<T>) -> Result<LandmarkSet<T>> {
    Structured::default().landmarks(grid)
}

/// `max - img`, pointwise.
pub fn invert_contrast<T: Real>(img: &ImageVolume<T>) -> ImageVolume<T> {
    let m = img.max();
    img.map(|v| m - v)
}

/// Constant velocity `offset` (physical units per unit time); its flow is a
/// translation by `offset`.
pub fn translation_velocity<T: Real>(grid: &ImageGrid<T>, offset: &[T], time_steps: usize) -> Result<TimeVaryingVelocity<T>> {
    if offset.len() != grid.ndim() {
        return Err(Error::InvalidParameter("offset has the wrong number of axes".into()));
    }
    let mut c = [T::zero(); 3];
    c[..offset.len()].copy_from_slice(offset);
    TimeVaryingVelocity::stationary(VectorField::from_fn(grid, |_| c), time_steps)
}

/// Swirl about the grid centre in the x-y plane: angular speed
/// `angle * exp(-r^2 / (2 R^2))` with `R = radius * half extent`.
/// Radii are preserved, so the unit-time flow rotates each point by its
/// own angle ([`swirl_point`]).
#[derive(Clone, Copy, Debug)]
pub struct Swirl<T> {
    pub center: Point<T>,
    pub angle: T,
    /// Physical width of the swirl profile.
    pub width: T,
}

impl<T: Real> Swirl<T> {
    pub fn new(grid: &ImageGrid<T>, angle: T, radius: T) -> Self {
        let frame = Frame::of(grid);
        Swirl {
            center: frame.center,
            angle,
            width: radius * frame.half[0].min(frame.half[1]),
        }
    }

    fn omega(&self, dx: T, dy: T) -> T {
        self.angle * (-(dx * dx + dy * dy) / (T::lit(2.0) * self.width * self.width)).exp()
    }

    pub fn velocity(&self, grid: &ImageGrid<T>, time_steps: usize) -> Result<TimeVaryingVelocity<T>> {
        let field = VectorField::from_fn(grid, |p| {
            let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
            let w = self.omega(dx, dy);
            [-w * dy, w * dx, T::zero()]
        });
        TimeVaryingVelocity::stationary(field, time_steps)
    }

    /// Exact position at time 1 of the point starting at `p`.
    pub fn swirl_point(&self, p: &[T]) -> Vec<T> {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let theta = self.omega(dx, dy);
        let (s, c) = theta.sin_cos();
        let mut q = p.to_vec();
        q[0] = self.center[0] + c * dx - s * dy;
        q[1] = self.center[1] + s * dx + c * dy;
        q
    }
}

/// Smooth random stationary velocity: a sum of `bumps` Gaussian vector bumps
/// centred in the inner half of the domain, scaled so the largest speed is
/// `amplitude` (physical units).
pub fn warp_velocity<T: Real>(
    grid: &ImageGrid<T>,
    amplitude: T,
    bumps: usize,
    seed: u64,
    time_steps: usize,
) -> Result<TimeVaryingVelocity<T>> {
    let frame = Frame::of(grid);
    let n = grid.ndim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = T::lit(0.35) * frame.half[0].min(frame.half[1]);
    let spec: Vec<(Vec<T>, [T; 3])> = (0..bumps)
        .map(|_| {
            let u: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-0.5..0.5))).collect();
            let mut dir = [T::zero(); 3];
            for d in dir.iter_mut().take(n) {
                *d = T::lit(rng.gen_range(-1.0..1.0));
            }
            (frame.physical(&u), dir)
        })
        .collect();
    let mut field = VectorField::from_fn(grid, |p| {
        let mut v = [T::zero(); 3];
        for (c, dir) in &spec {
            let r2: T = (0..n).map(|a| (p[a] - c[a]) * (p[a] - c[a])).sum();
            let g = (-r2 / (T::lit(2.0) * width * width)).exp();
            for a in 0..n {
                v[a] += g * dir[a];
            }
        }
        v
    });
    let peak = field.max_norm();
    if peak > T::zero() {
        field = field.scaled(amplitude / peak);
    }
    TimeVaryingVelocity::stationary(field, time_steps)
}

/// Template, target `= template o phi_10` and landmarks moved along their
/// trajectories.
#[derive(Clone, Debug)]
pub struct PhantomPair<T> {
    pub template: ImageVolume<T>,
    pub target: ImageVolume<T>,
    pub template_landmarks: LandmarkSet<T>,
    pub target_landmarks: LandmarkSet<T>,
    /// `phi_10`, the pullback that produced the target.
    pub image_map: DeformationMap<T>,
    /// `phi_01`, carrying template points into the target.
    pub point_map: DeformationMap<T>,
}

/// Deform `template` by the flow of `v` and carry `landmarks` along.
///
/// Ground truth is built by tracing trajectories ([`trace_map`],
/// [`trace_points`]), not with the semi-Lagrangian scheme the registration
/// uses, so it does not share that scheme's discretisation error.
pub fn warp_pair<T: Real>(
    template: ImageVolume<T>,
    v: &TimeVaryingVelocity<T>,
    landmarks: LandmarkSet<T>,
) -> Result<PhantomPair<T>> {
    template.grid().ensure_matches(v.grid(), "phantom warp")?;
    let image_map = trace_map(v, false);
    let point_map = trace_map(v, true);
    let target = deform_image(&template, &image_map);
    let n = landmarks.ndim();
    let target_landmarks = landmarks.map_points(|p| {
        let mut q = [T::zero(); 3];
        q[..n].copy_from_slice(p);
        trace_points(v, &[q], true)[0][..n].to_vec()
    })?;
    Ok(PhantomPair {
        template,
        target,
        template_landmarks: landmarks,
        target_landmarks,
        image_map,
        point_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_is_exact() {
        let g = ImageGrid::<f64>::with_dims(&[16, 12]).unwrap();
        let img = structured(&g);
        let inv = invert_contrast(&img);
        let m = img.max();
        for (a, b) in img.data().iter().zip(inv.data()) {
            assert_eq!(*b, m - a);
        }
    }

    #[test]
    fn structured_has_background_and_levels() {
        let g = ImageGrid::<f64>::with_dims(&[64, 64]).unwrap();
        let img = structured(&g);
        assert!(img.get([0, 0, 0]).abs() < 1e-6);
        assert!(img.max() > 1.7 && img.min() > -1e-6);
        let lm = structured_landmarks(&g).unwrap();
        assert_eq!(lm.len(), 8);
    }

    #[test]
    fn zero_translation_leaves_template() {
        let g = ImageGrid::<f64>::with_dims(&[12, 12]).unwrap();
        let v = translation_velocity(&g, &[0.0, 0.0], 5).unwrap();
        let pair = warp_pair(structured(&g), &v, structured_landmarks(&g).unwrap()).unwrap();
        assert_eq!(pair.template, pair.target);
        assert_eq!(pair.template_landmarks, pair.target_landmarks);
    }

    #[test]
    fn warp_is_seeded() {
        let g = ImageGrid::<f64>::with_dims(&[16, 16]).unwrap();
        let a = warp_velocity(&g, 2.0, 3, 7, 4).unwrap();
        let b = warp_velocity(&g, 2.0, 3, 7, 4).unwrap();
        let c = warp_velocity(&g, 2.0, 3, 8, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a.slice(0).max_norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn c_shape_has_a_gap() {
        let g = ImageGrid::<f64>::with_dims(&[41, 41]).unwrap();
        let img = c_shape(&g, 0.6, 0.2, 1.0);
        // ring at radius 12 voxels: gap on +x, closed on -x
        assert!(img.get([32, 20, 0]) < 0.05);
        assert!(img.get([8, 20, 0]) > 0.95);
    }
}
