use misr4d::datacube::*;
use misr4d::Error;
use ndarray::Array4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn calib(k: usize, center: (f64, f64)) -> ScanCalibration {
    ScanCalibration {
        detector_shape: (k, k),
        center,
        ..ScanCalibration::default()
    }
}

fn random_cube(shape: (usize, usize, usize, usize), seed: u64) -> DataCube4D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Array4::from_shape_simple_fn(shape, || rng.gen_range(0.0..10.0));
    let k = shape.2;
    DataCube4D::new(
        v,
        calib(k, (k as f64 / 2.0, k as f64 / 2.0)),
        Layout::RealMajor,
        false,
    )
    .unwrap()
}

#[test]
fn transpose_moves_value_by_definition() {
    let mut v = Array4::zeros((2, 2, 2, 2));
    v[[0, 1, 1, 0]] = 7.0;
    let cube = DataCube4D::new(v, calib(2, (0.5, 0.5)), Layout::RealMajor, false).unwrap();
    let t = transpose_domains(&cube);
    assert_eq!(t.layout(), Layout::RecipMajor);
    assert_eq!(t.values()[[1, 0, 0, 1]], 7.0);
    assert_eq!(t.values().sum(), 7.0);
}

#[test]
fn random_cube_sum_and_involution() {
    let cube = random_cube((4, 4, 8, 8), 9);
    let t = transpose_domains(&cube);
    let s0: f64 = cube.values().iter().sum();
    let mut a: Vec<f64> = cube.values().iter().copied().collect();
    let mut b: Vec<f64> = t.values().iter().copied().collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
    assert!((t.values().iter().sum::<f64>() - s0).abs() < 1e-9);
    assert_eq!(transpose_domains(&t), cube);
    assert_eq!(t.to_real_major(), cube);
    assert_eq!(t.detector_image(3, 5), cube.detector_image(3, 5));
}

#[test]
fn empty_cube_errors() {
    let cube = DataCube4D::new(
        Array4::zeros((2, 2, 8, 8)),
        calib(8, (4.0, 4.0)),
        Layout::RealMajor,
        false,
    )
    .unwrap();
    assert!(matches!(estimate_center(&cube), Err(Error::EmptyDatacube)));
    assert_eq!(Error::EmptyDatacube.to_string(), "empty datacube");
}

fn delta_cube(k: usize, at: (usize, usize)) -> DataCube4D {
    let mut v = Array4::zeros((2, 3, k, k));
    for rx in 0..2 {
        for ry in 0..3 {
            v[[rx, ry, at.0, at.1]] = 1.0;
        }
    }
    DataCube4D::new(
        v,
        calib(k, (k as f64 / 2.0, k as f64 / 2.0)),
        Layout::RealMajor,
        false,
    )
    .unwrap()
}

#[test]
fn recenter_delta_examples() {
    let cube = delta_cube(8, (3, 5));
    assert_eq!(estimate_center(&cube).unwrap(), (3.0, 5.0));
    let moved = recenter(&cube, (4.0, 5.0)).unwrap();
    assert_eq!(moved.pattern(1, 2)[[4, 5]], 1.0);
    assert_eq!(moved.calib().center, (4.0, 5.0));
    let half = recenter(&cube, (3.5, 5.0)).unwrap();
    let p = half.pattern(0, 0);
    assert!((p[[3, 5]] - 0.5).abs() < 1e-12 && (p[[4, 5]] - 0.5).abs() < 1e-12);
    assert!(matches!(
        recenter(&cube, (7.9, 0.1)),
        Err(Error::CenterOutOfRange { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transpose_is_bit_exact_involution(h in 1usize..5, w in 1usize..5, k in 1usize..7, seed in any::<u64>()) {
        let cube = random_cube((h, w, k, k), seed);
        let t = transpose_domains(&cube);
        prop_assert_eq!(t.values().shape(), &[k, k, h, w]);
        prop_assert_eq!(transpose_domains(&t), cube.clone());
        let max = |c: &DataCube4D| c.values().iter().copied().fold(f64::MIN, f64::max);
        let min = |c: &DataCube4D| c.values().iter().copied().fold(f64::MAX, f64::min);
        prop_assert_eq!(max(&t), max(&cube));
        prop_assert_eq!(min(&t), min(&cube));
    }

    #[test]
    fn recenter_hits_target(qx in 2usize..14, qy in 2usize..14, tx in 4.0f64..12.0, ty in 4.0f64..12.0) {
        let cube = delta_cube(16, (qx, qy));
        prop_assume!((tx - qx as f64).abs() <= 8.0 && (ty - qy as f64).abs() <= 8.0);
        let out = recenter(&cube, (tx, ty)).unwrap();
        let c = estimate_center(&out).unwrap();
        prop_assert!((c.0 - tx).abs() < 0.05 && (c.1 - ty).abs() < 0.05, "{:?} vs {:?}", c, (tx, ty));
        // flux is preserved by the circular shift
        prop_assert!((out.values().sum() - cube.values().sum()).abs() < 1e-9);
    }

    #[test]
    fn identity_affine_is_identity(seed in any::<u64>()) {
        let cube = random_cube((2, 2, 6, 6), seed);
        let out = apply_affine(&cube, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        prop_assert_eq!(out.values(), cube.values());
    }
}
