//! Energy, gradient and optimiser behaviour of the registration stages.

use lddmm::affine::{affine_register_with, apply_affine, AffineOptions, AffineTransform};
use lddmm::flow::TimeVaryingVelocity;
use lddmm::grid::{ImageGrid, ImageVolume, VectorField};
use lddmm::kernel::{KernelParams, SpectralKernel};
use lddmm::lddmm::{register, velocity_inner, Problem, RegistrationConfig, RegistrationResult};
use lddmm::matching::MatcherKind;
use lddmm::multires::{run_schedule, Schedule};
use lddmm::phantom::{blob, invert_contrast, Structured};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1.0 / 32.0;

fn grid64() -> ImageGrid<f64> {
    ImageGrid::new(&[64, 64], &[H, H], &[0.0, 0.0]).unwrap()
}

#[test]
fn constant_velocity_costs_half_gamma_squared_speed_squared_volume() {
    let g = ImageGrid::<f64>::new(&[12, 10], &[0.3, 0.2], &[0.0, 0.0]).unwrap();
    let img = ImageVolume::filled(&g, 1.0);
    let mut cfg = RegistrationConfig::new(1.0, MatcherKind::Ssd);
    cfg.kernel = KernelParams::new(0.4, 1.5).unwrap();
    let c = [0.7, -0.3];
    let v = TimeVaryingVelocity::stationary(VectorField::from_fn(&g, |_| [c[0], c[1], 0.0]), 10).unwrap();
    let r = Problem::new(&img, &img, &cfg).unwrap().regularization(&v).unwrap();
    let want = 0.5 * 1.5 * 1.5 * (c[0] * c[0] + c[1] * c[1]) * g.len() as f64 * g.voxel_volume();
    assert!((r - want).abs() <= 1e-6 * want, "{r} vs {want}");
}

fn smooth_field(g: &ImageGrid<f64>, rng: &mut ChaCha8Rng, peak: f64, k: &SpectralKernel<f64>) -> VectorField<f64> {
    let comps = (0..2).map(|_| (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let s = k.apply_k(&VectorField::new(g.clone(), comps).unwrap()).unwrap();
    let m = s.max_norm();
    s.scaled(peak / m)
}

fn smooth_velocity(g: &ImageGrid<f64>, rng: &mut ChaCha8Rng, peak: f64, steps: usize) -> TimeVaryingVelocity<f64> {
    let h = g.spacing()[0];
    let k = SpectralKernel::new(g, KernelParams::new(2.0 * h * h, 1.0).unwrap()).unwrap();
    TimeVaryingVelocity::new((0..steps).map(|_| smooth_field(g, rng, peak, &k)).collect()).unwrap()
}

/// Worst relative gap between `<grad, dv>_V` and a central difference of the
/// energy over a few random smooth directions.
fn gradient_gap(matcher: MatcherKind, seed: u64, eps: f64) -> f64 {
    let h = 1.0 / 32.0;
    let g = ImageGrid::<f64>::new(&[32, 32], &[h, h], &[0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| (rng.gen_range(8.0..24.0) * h, rng.gen_range(8.0..24.0) * h, rng.gen_range(3.0..6.0) * h, rng.gen_range(0.5..1.5)))
        .collect();
    let image = |shift: f64| {
        ImageVolume::from_fn(&g, |p| {
            blobs.iter().map(|&(x, y, s, a)| a * (-((p[0] - x - shift).powi(2) + (p[1] - y).powi(2)) / (2.0 * s * s)).exp()).sum()
        })
    };
    let (i0, j1) = (image(0.0), image(1.5 * h));
    let mut cfg = RegistrationConfig::new(0.5, matcher);
    cfg.kernel = KernelParams::new(0.5 * h * h, 1.0).unwrap();
    let v = smooth_velocity(&g, &mut rng, h, cfg.time_steps);
    let pb = Problem::new(&i0, &j1, &cfg).unwrap();
    let (_, grad) = pb.gradient(&v).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..3 {
        let dv = smooth_velocity(&g, &mut rng, h, cfg.time_steps);
        let an = velocity_inner(&pb.kernel, &grad, &dv).unwrap();
        let mut a = v.clone();
        a.axpy(eps, &dv);
        let mut b = v.clone();
        b.axpy(-eps, &dv);
        let fd = (pb.energy(&a).unwrap().total - pb.energy(&b).unwrap().total) / (2.0 * eps);
        worst = worst.max((an - fd).abs() / fd.abs());
    }
    worst
}

#[test]
fn gradient_matches_energy_differences() {
    for matcher in [MatcherKind::Ssd, MatcherKind::MutualInformation { bins: 16 }] {
        for seed in 0..4 {
            // larger steps cross interpolation kinks
            let gap = gradient_gap(matcher, seed, 1e-6);
            assert!(gap <= 1e-3, "{matcher:?} seed {seed}: relative gap {gap}");
        }
    }
}

fn peak(v: &TimeVaryingVelocity<f64>) -> f64 {
    v.slices().iter().map(|s| s.max_norm()).fold(0.0, f64::max)
}

#[test]
fn huge_sigma_leaves_only_the_velocity_in_the_gradient() {
    let g = ImageGrid::<f64>::new(&[24, 24], &[H, H], &[0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let i0 = blob(&g, &[10.0, 12.0], 4.0);
    let j1 = blob(&g, &[13.0, 12.0], 4.0);
    let mut cfg = RegistrationConfig::new(1e8, MatcherKind::Ssd);
    cfg.kernel = KernelParams::new(0.001, 1.0).unwrap();
    let v = smooth_velocity(&g, &mut rng, 3.0 * H, cfg.time_steps);
    let (_, grad) = Problem::new(&i0, &j1, &cfg).unwrap().gradient(&v).unwrap();
    let mut diff = grad.clone();
    diff.axpy(-1.0, &v);
    let rel = peak(&diff) / peak(&v);
    assert!(rel < 1e-6, "relative gap {rel}");
}

#[test]
fn ssd_gradient_vanishes_at_the_solution() {
    let g = ImageGrid::<f64>::new(&[20, 16], &[H, H], &[0.0, 0.0]).unwrap();
    let img = blob(&g, &[9.0, 8.0], 3.0);
    let cfg = RegistrationConfig::new(0.05, MatcherKind::Ssd);
    let zero = TimeVaryingVelocity::zeros(&g, cfg.time_steps).unwrap();
    let (_, grad) = Problem::new(&img, &img, &cfg).unwrap().gradient(&zero).unwrap();
    assert_eq!(peak(&grad), 0.0);
}

/// Error in voxels of the blob centre carried by `phi_01`.
fn centre_error(res: &RegistrationResult<f64>, from: [f64; 2], to: [f64; 2]) -> f64 {
    let q = res.inverse_map.apply(&[from[0] * H, from[1] * H, 0.0]);
    ((q[0] / H - to[0]).powi(2) + (q[1] / H - to[1]).powi(2)).sqrt()
}

fn accepted_non_increasing(res: &RegistrationResult<f64>) {
    let accepted: Vec<f64> = res.trace.iter().filter(|e| e.accepted).map(|e| e.energy).collect();
    assert!(accepted.windows(2).all(|w| w[1] <= w[0]), "accepted energy went up");
}

const FROM: [f64; 2] = [30.0, 31.5];
const TO: [f64; 2] = [33.0, 31.5];

fn blob_pair(invert: bool) -> (ImageVolume<f64>, ImageVolume<f64>) {
    let g = grid64();
    let j = blob(&g, &TO, 6.0);
    (blob(&g, &FROM, 6.0), if invert { invert_contrast(&j) } else { j })
}

#[test]
fn translated_blob_is_recovered_with_ssd() {
    let (i0, j1) = blob_pair(false);
    let cfg = RegistrationConfig::new(0.05, MatcherKind::Ssd);
    let res = register(&i0, &j1, &cfg, None).unwrap();
    accepted_non_increasing(&res);
    let err = centre_error(&res, FROM, TO);
    assert!(err < 0.5, "centre error {err} voxel");
}

#[test]
fn inverted_blob_needs_mutual_information() {
    let (i0, j1) = blob_pair(true);
    let mi = register(&i0, &j1, &RegistrationConfig::new(0.05, MatcherKind::MutualInformation { bins: 32 }), None).unwrap();
    let ssd = register(&i0, &j1, &RegistrationConfig::new(0.05, MatcherKind::Ssd), None).unwrap();
    accepted_non_increasing(&mi);
    accepted_non_increasing(&ssd);
    let (e_mi, e_ssd) = (centre_error(&mi, FROM, TO), centre_error(&ssd, FROM, TO));
    assert!(e_mi < 0.5, "MI centre error {e_mi} voxel");
    assert!(e_ssd > 2.0, "SSD centre error {e_ssd} voxel");
}

#[test]
fn coarse_start_matches_with_half_the_fine_budget() {
    let (i0, j1) = blob_pair(false);
    let g = grid64();
    let cfg = RegistrationConfig::new(0.05, MatcherKind::Ssd);
    let single = run_schedule(&i0, &j1, &Schedule::single(&g, 0.02, 200), &cfg).unwrap();
    let fine_single = single.levels[0].iterations - 1;
    let mut two = Schedule::pyramid(&g, &[2.0, 1.0], 0.02, 200);
    two.levels[1].iterations = fine_single / 2;
    let two = run_schedule(&i0, &j1, &two, &cfg).unwrap();
    let (m_single, m_two) = (single.result.final_entry().matching, two.result.final_entry().matching);
    assert!(m_two <= m_single + 1e-6, "{m_two} vs {m_single}");
}

fn textured(g: &ImageGrid<f64>) -> ImageVolume<f64> {
    Structured { size: 0.6, texture: 0.4 }.render(g)
}

#[test]
fn affine_round_trip_keeps_the_image() {
    let g = ImageGrid::<f64>::with_dims(&[48, 48]).unwrap();
    let img = textured(&g);
    let c = g.center();
    let (s, co) = 0.2f64.sin_cos();
    let m = vec![vec![1.05 * co, -s], vec![s, 0.95 * co]];
    let t = vec![c[0] - m[0][0] * c[0] - m[0][1] * c[1] + 1.5, c[1] - m[1][0] * c[0] - m[1][1] * c[1] - 0.7];
    let a = AffineTransform::new(&m, &t).unwrap();
    let back = apply_affine(&apply_affine(&img, &a, &g).unwrap(), &a.inverse().unwrap(), &g).unwrap();
    let energy: f64 = img.data().iter().map(|v| v * v).sum();
    let lost: f64 = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(lost < 0.01 * energy, "round trip lost {}", lost / energy);
}

#[test]
fn accepted_affine_steps_never_lower_mi() {
    let g = ImageGrid::<f64>::with_dims(&[48, 48]).unwrap();
    let img = textured(&g);
    let a = AffineTransform::scaling_about(&g.center()[..2], &[1.06, 0.96], &[1.2, -0.8]).unwrap();
    let target = invert_contrast(&apply_affine(&img, &a, &g).unwrap());
    let res = affine_register_with(&img, &target, &AffineOptions::new(32, 100)).unwrap();
    let mut last: Option<(usize, f64)> = None;
    for e in res.trace.iter().filter(|e| e.accepted) {
        if let Some((level, value)) = last {
            if level == e.level {
                assert!(e.value <= value, "level {level}: {} after {value}", e.value);
            }
        }
        last = Some((e.level, e.value));
    }
    assert!(res.trace.iter().any(|e| !e.accepted));
}
