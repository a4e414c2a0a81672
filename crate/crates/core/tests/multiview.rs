use misr4d::baselines::bf_sum;
use misr4d::datacube::{transpose_domains, DataCube4D, Layout, ScanCalibration};
use misr4d::multiview::*;
use misr4d::Error;
use ndarray::{Array3, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn calib(k: usize, convergence: f64, pixel: f64) -> ScanCalibration {
    ScanCalibration {
        detector_shape: (k, k),
        center: ((k / 2) as f64, (k / 2) as f64),
        convergence,
        detector_pixel: pixel,
        ..ScanCalibration::default()
    }
}

fn random_cube(c: &ScanCalibration, seed: u64) -> DataCube4D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, _) = c.detector_shape;
    let v = Array4::from_shape_simple_fn((5, 4, k, k), || rng.gen_range(0.0..1.0));
    DataCube4D::new(v, c.clone(), Layout::RealMajor, false).unwrap()
}

#[test]
fn mask_radial_threshold_and_symmetry() {
    let c = calib(32, 10.0, 1.0);
    let m = bf_mask(&c, 0.9).unwrap();
    assert!(m[[16 + 9, 16]] && !m[[16 + 10, 16]]);
    assert!(m[[16, 16 - 9]] && !m[[16, 16 - 10]]);
    for ((i, j), &v) in m.indexed_iter() {
        if (1..32).contains(&i) && (1..32).contains(&j) {
            assert_eq!(v, m[[32 - i, j]]);
            assert_eq!(v, m[[i, 32 - j]]);
        }
    }
    assert!(bf_mask(&c, 1.0).unwrap()[[16, 16]]);
    assert!(bf_mask(&c, 0.0).is_err());
}

#[test]
fn unbinned_views_are_detector_slices() {
    // radius 3.4 px on a 1 mrad grid: 37 pixels
    let c = calib(12, 3.4, 1.0);
    let mask = bf_mask(&c, 1.0).unwrap();
    assert_eq!(mask.iter().filter(|&&m| m).count(), 37);
    let cube = random_cube(&c, 1);
    let stack = extract_views(&cube, &mask, 1).unwrap();
    assert_eq!(stack.len(), 37);
    let blocks = view_blocks(&c, &mask, 1).unwrap();
    for (v, &(qx, qy)) in blocks.iter().enumerate() {
        assert_eq!(
            stack.views.index_axis(Axis(0), v),
            cube.detector_image(qx, qy)
        );
    }
    // reciprocal-major input gives the same stack
    assert_eq!(
        extract_views(&transpose_domains(&cube), &mask, 1)
            .unwrap()
            .views,
        stack.views
    );
}

#[test]
fn vacuum_views_are_constant() {
    let c = ScanCalibration::default();
    let v = Array4::from_shape_fn((4, 4, 32, 32), |(_, _, i, j)| ((i * 7 + j) % 5) as f64);
    let cube = DataCube4D::new(v, c, Layout::RealMajor, false).unwrap();
    let stack = ViewSettings::default().extract(&cube).unwrap();
    for view in stack.views.outer_iter() {
        assert!(view.iter().all(|&x| x == view[[0, 0]]));
    }
}

#[test]
fn oversize_bin_is_rejected() {
    let c = calib(16, 3.0, 1.0);
    let mask = bf_mask(&c, 1.0).unwrap();
    assert!(matches!(
        view_blocks(&c, &mask, 8),
        Err(Error::BinningEliminatesViews(8))
    ));
}

#[test]
fn normalization_examples() {
    let c = calib(8, 2.0, 1.0);
    let cube = random_cube(&c, 2);
    let mut stack = extract_views(&cube, &bf_mask(&c, 1.0).unwrap(), 1).unwrap();
    stack.views.index_axis_mut(Axis(0), 0).fill(5.0);
    let once = normalize_views(&stack).unwrap();
    assert!(once.views.index_axis(Axis(0), 0).iter().all(|&x| x == 1.0));
    assert_eq!(normalize_views(&once).unwrap(), once);
    for view in once.views.outer_iter() {
        assert!((view.mean().unwrap() - 1.0).abs() < 1e-10);
    }
    stack.views.index_axis_mut(Axis(0), 1).fill(0.0);
    assert!(matches!(normalize_views(&stack), Err(Error::DeadView(1))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flux_partition(seed in any::<u64>(), rf in 0.3f64..1.0) {
        let c = calib(16, 6.0, 1.0);
        let cube = random_cube(&c, seed);
        let mask = bf_mask(&c, rf).unwrap();
        let total = extract_views(&cube, &mask, 1).unwrap().views.sum_axis(Axis(0));
        let direct = bf_sum(&cube, &mask).unwrap();
        for (a, b) in total.iter().zip(direct.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn view_count_independent_of_contents(s1 in any::<u64>(), s2 in any::<u64>(), bin in 1usize..4) {
        let c = calib(16, 6.0, 1.0);
        let mask = bf_mask(&c, 0.9).unwrap();
        let a = extract_views(&random_cube(&c, s1), &mask, bin).unwrap();
        let b = extract_views(&random_cube(&c, s2), &mask, bin).unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert_eq!(a.angles, b.angles);
    }

    #[test]
    fn normalized_means_are_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = calib(8, 2.0, 1.0);
        let mut stack = extract_views(&random_cube(&c, seed), &bf_mask(&c, 1.0).unwrap(), 1).unwrap();
        stack.views = Array3::from_shape_simple_fn(stack.views.dim(), || rng.gen_range(0.01..100.0));
        let n = normalize_views(&stack).unwrap();
        for view in n.views.outer_iter() {
            prop_assert!((view.mean().unwrap() - 1.0).abs() < 1e-10);
        }
    }
}
