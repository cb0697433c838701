//! Invariants over random inputs.

use lddmm::flow::{compose, integrate_backward, integrate_forward, TimeVaryingVelocity};
use lddmm::grid::{gradient, interior_indices, jacobian_determinant, DeformationMap, ImageGrid, ImageVolume, VectorField};
use lddmm::kernel::{h1_seminorm, KernelParams, SpectralKernel};
use lddmm::lddmm::{register, RegistrationConfig};
use lddmm::matching::{mutual_information, ssd, MatcherKind};
use lddmm::multires::upsample_velocity;
use lddmm::phantom::blob;
use lddmm::validation::{checkerboard, landmark_error, transform_landmarks, LandmarkSet, MapDirection};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = ImageGrid<f64>> {
    prop_oneof![
        (4usize..12, 4usize..12, 0.3f64..2.0, 0.3f64..2.0)
            .prop_map(|(a, b, h0, h1)| ImageGrid::new(&[a, b], &[h0, h1], &[0.5, -1.0]).unwrap()),
        (3usize..7, 3usize..7, 3usize..7, 0.3f64..2.0)
            .prop_map(|(a, b, c, h)| ImageGrid::new(&[a, b, c], &[h, 1.3 * h, 0.8 * h], &[0.0, 0.0, 0.0]).unwrap()),
    ]
}

fn image_strategy() -> impl Strategy<Value = ImageVolume<f64>> {
    grid_strategy().prop_flat_map(|g| {
        prop::collection::vec(-2.0f64..2.0, g.len()).prop_map(move |d| ImageVolume::new(g.clone(), d).unwrap())
    })
}

fn field_on(g: ImageGrid<f64>) -> impl Strategy<Value = VectorField<f64>> {
    let (n, len) = (g.ndim(), g.len());
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, len), n)
        .prop_map(move |c| VectorField::new(g.clone(), c).unwrap())
}

fn params() -> impl Strategy<Value = KernelParams<f64>> {
    (0.0f64..2.0, 1.0f64..3.0).prop_map(|(a, g)| KernelParams::new(a, g).unwrap())
}

fn close(a: &VectorField<f64>, b: &VectorField<f64>, tol: f64) -> bool {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d.max_norm() <= tol * (1.0 + b.max_norm())
}

/// Smooth velocity of peak speed `peak` voxels per unit time on a 24² unit grid.
fn smooth_velocity(coef: &[f64], peak: f64, steps: usize) -> TimeVaryingVelocity<f64> {
    let g = ImageGrid::<f64>::with_dims(&[24, 24]).unwrap();
    let slices: Vec<VectorField<f64>> = (0..steps)
        .map(|j| {
            let t = j as f64 / (steps - 1) as f64;
            VectorField::from_fn(&g, |p| {
                let (x, y) = (p[0] / 24.0, p[1] / 24.0);
                let s = (std::f64::consts::TAU * (x + coef[0])).sin() * (std::f64::consts::PI * y).sin();
                let c = (std::f64::consts::TAU * (y + coef[1])).cos() * (std::f64::consts::PI * x).sin();
                [s * (coef[2] + t * coef[3]), c * (coef[3] - t * coef[2]), 0.0]
            })
        })
        .collect();
    let m = slices.iter().map(|s| s.max_norm()).fold(1e-12, f64::max);
    TimeVaryingVelocity::new(slices.into_iter().map(|s| s.scaled(peak / m)).collect()).unwrap()
}

proptest! {
    #[test]
    fn interpolation_is_exact_at_nodes(img in image_strategy()) {
        for idx in 0..img.grid().len() {
            prop_assert!((img.sample(&img.grid().point_of(idx)) - img.data()[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_an_affine_image_is_its_slope(
        g in grid_strategy(),
        slope in prop::array::uniform3(-3.0f64..3.0),
        offset in -5.0f64..5.0,
    ) {
        let img = ImageVolume::from_fn(&g, |p| offset + slope[0] * p[0] + slope[1] * p[1] + slope[2] * p[2]);
        let grad = gradient(&img);
        for a in 0..g.ndim() {
            prop_assert!(grad.component(a).iter().all(|d| (d - slope[a]).abs() < 1e-9));
        }
    }

    #[test]
    fn identity_map_has_unit_jacobian(g in grid_strategy()) {
        let det = jacobian_determinant(&DeformationMap::identity(&g));
        prop_assert!(det.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn kernel_inverts_the_operator(f in grid_strategy().prop_flat_map(field_on), p in params()) {
        let k = SpectralKernel::new(f.grid(), p).unwrap();
        let a = k.apply_k(&k.apply_ldag_l(&f).unwrap()).unwrap();
        let b = k.apply_ldag_l(&k.apply_k(&f).unwrap()).unwrap();
        prop_assert!(close(&a, &f, 1e-9));
        prop_assert!(close(&b, &f, 1e-9));
    }

    #[test]
    fn kernel_is_linear(
        (f, g) in grid_strategy().prop_flat_map(|g| (field_on(g.clone()), field_on(g))),
        p in params(),
        s in -3.0f64..3.0,
    ) {
        let k = SpectralKernel::new(f.grid(), p).unwrap();
        let mut sum = f.clone();
        sum.axpy(s, &g);
        let mut parts = k.apply_k(&f).unwrap();
        parts.axpy(s, &k.apply_k(&g).unwrap());
        prop_assert!(close(&k.apply_k(&sum).unwrap(), &parts, 1e-10));
    }

    #[test]
    fn kernel_commutes_with_itself_across_parameters(f in grid_strategy().prop_flat_map(field_on), p in params(), q in params()) {
        let kp = SpectralKernel::new(f.grid(), p).unwrap();
        let kq = SpectralKernel::new(f.grid(), q).unwrap();
        let a = kp.apply_k(&kq.apply_ldag_l(&f).unwrap()).unwrap();
        let b = kq.apply_ldag_l(&kp.apply_k(&f).unwrap()).unwrap();
        prop_assert!(close(&a, &b, 1e-8));
    }

    #[test]
    fn kernel_smooths(f in grid_strategy().prop_flat_map(field_on), p in params()) {
        let k = SpectralKernel::new(f.grid(), p).unwrap();
        let gamma = p.gamma;
        prop_assert!(h1_seminorm(&k.apply_k(&f).unwrap()) <= h1_seminorm(&f) / (gamma * gamma) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn ssd_derivative_is_twice_the_difference((i, j) in image_strategy().prop_flat_map(|i| {
        let g = i.grid().clone();
        (Just(i), prop::collection::vec(-2.0f64..2.0, g.len()).prop_map(move |d| ImageVolume::new(g.clone(), d).unwrap()))
    })) {
        let r = ssd(&i, &j).unwrap();
        for ((d, a), b) in r.gradient.data().iter().zip(i.data()).zip(j.data()) {
            prop_assert_eq!(*d, 2.0 * (a - b));
        }
    }

    #[test]
    fn mi_is_bounded((i, j) in image_strategy().prop_flat_map(|i| {
        let g = i.grid().clone();
        (Just(i), prop::collection::vec(-2.0f64..2.0, g.len()).prop_map(move |d| ImageVolume::new(g.clone(), d).unwrap()))
    }), bins in 4usize..40) {
        let mi = -mutual_information(&i, &j, bins).unwrap().value;
        prop_assert!(mi >= -1e-12);
        prop_assert!(mi <= (bins as f64).ln() + 1e-12);
    }

    #[test]
    fn upsampling_keeps_linear_fields(
        slope in prop::array::uniform2(-1.0f64..1.0),
        c in -2.0f64..2.0,
        dims in (4usize..10, 4usize..10),
    ) {
        let coarse = ImageGrid::new(&[dims.0, dims.1], &[2.0, 2.0], &[0.0, 0.0]).unwrap();
        let fine = coarse.with_spacing(&[1.0, 1.0]).unwrap();
        let f = |p: &[f64; 3]| [c + slope[0] * p[0] + slope[1] * p[1], c, 0.0];
        let v = TimeVaryingVelocity::stationary(VectorField::from_fn(&coarse, f), 3).unwrap();
        let up = upsample_velocity(&v, &fine).unwrap();
        for s in up.slices() {
            for idx in 0..fine.len() {
                let p = fine.point_of(idx);
                // linear only inside the coarse node hull
                let inside = (0..2).all(|a| p[a] >= coarse.origin()[a] && p[a] <= coarse.origin()[a] + 2.0 * (coarse.dims()[a] - 1) as f64);
                if inside {
                    let want = f(&p);
                    let got = s.at(idx);
                    prop_assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn landmark_error_is_symmetric(
        a in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..8),
        shift in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let labels: Vec<String> = (0..a.len()).map(|k| format!("l{k}")).collect();
        let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        let pa: Vec<Vec<f64>> = a.iter().map(|p| p.to_vec()).collect();
        let pb: Vec<Vec<f64>> = a.iter().enumerate().map(|(k, p)| (0..3).map(|i| p[i] + shift[i] * k as f64).collect()).collect();
        let la = LandmarkSet::from_points(&refs, &pa).unwrap();
        let lb = LandmarkSet::from_points(&refs, &pb).unwrap();
        let ab = landmark_error(&la, &lb).unwrap();
        let ba = landmark_error(&lb, &la).unwrap();
        prop_assert_eq!(ab.mean, ba.mean);
        prop_assert_eq!(landmark_error(&la, &la).unwrap().mean, 0.0);
    }

    #[test]
    fn identity_map_leaves_landmarks_alone(
        g in grid_strategy(),
        u in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 1..6),
    ) {
        let n = g.ndim();
        let pts: Vec<Vec<f64>> = u.iter().map(|q| (0..n).map(|a| g.origin()[a] + q[a] * (g.dims()[a] - 1) as f64 * g.spacing()[a]).collect()).collect();
        let labels: Vec<String> = (0..pts.len()).map(|k| format!("l{k}")).collect();
        let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        let lm = LandmarkSet::from_points(&refs, &pts).unwrap();
        let id = DeformationMap::identity(&g);
        for dir in [MapDirection::PointMap, MapDirection::ImageMap] {
            let out = transform_landmarks(&lm, &id, dir).unwrap();
            prop_assert_eq!(&out.landmarks, &lm);
        }
    }

    #[test]
    fn checkerboard_swap_partitions_the_pair((a, b) in image_strategy().prop_flat_map(|i| {
        let g = i.grid().clone();
        (Just(i), prop::collection::vec(-2.0f64..2.0, g.len()).prop_map(move |d| ImageVolume::new(g.clone(), d).unwrap()))
    }), tile in 1usize..5) {
        let ab = checkerboard(&a, &b, tile).unwrap();
        let ba = checkerboard(&b, &a, tile).unwrap();
        for k in 0..a.data().len() {
            let (x, y) = (ab.data()[k], ba.data()[k]);
            prop_assert!((x == a.data()[k] && y == b.data()[k]) || (x == b.data()[k] && y == a.data()[k]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_velocity_gives_identity_maps(g in grid_strategy(), steps in 2usize..8) {
        let v = TimeVaryingVelocity::zeros(&g, steps).unwrap();
        for j in 0..steps {
            prop_assert!(integrate_backward(&v, j).unwrap().is_identity());
            prop_assert!(integrate_forward(&v, j).unwrap().is_identity());
        }
    }

    #[test]
    fn smooth_flows_are_invertible_and_orientation_preserving(
        coef in prop::array::uniform4(-1.0f64..1.0),
        peak in 0.5f64..4.0,
    ) {
        let v = smooth_velocity(&coef, peak, 16);
        let f = integrate_forward(&v, 0).unwrap();
        let b = integrate_backward(&v, 15).unwrap();
        let g = v.grid().clone();
        let id = compose(&f, &b).unwrap();
        for idx in interior_indices(&g, 4) {
            let u = id.displacement().at(idx);
            prop_assert!(u[0].abs().max(u[1].abs()) < 0.5);
        }
        for m in [&f, &b] {
            let det = jacobian_determinant(m);
            prop_assert!(interior_indices(&g, 1).into_iter().all(|i| det.data()[i] > 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn accepted_energies_never_rise(
        shift in prop::array::uniform2(-3.0f64..3.0),
        sigma in 0.02f64..0.5,
        mi in any::<bool>(),
    ) {
        let h = 1.0 / 24.0;
        let g = ImageGrid::new(&[24, 24], &[h, h], &[0.0, 0.0]).unwrap();
        let i0 = blob(&g, &[11.5, 11.5], 4.0);
        let j1 = blob(&g, &[11.5 + shift[0], 11.5 + shift[1]], 4.0);
        let matcher = if mi { MatcherKind::MutualInformation { bins: 16 } } else { MatcherKind::Ssd };
        let mut cfg = RegistrationConfig::new(sigma, matcher);
        cfg.max_iterations = 30;
        let res = register(&i0, &j1, &cfg, None).unwrap();
        let accepted: Vec<f64> = res.trace.iter().filter(|e| e.accepted).map(|e| e.energy).collect();
        prop_assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
    }
}
