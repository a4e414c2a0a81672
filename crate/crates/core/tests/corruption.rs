use misr4d::corruption::*;
use misr4d::datacube::{DataCube4D, Layout, ScanCalibration};
use misr4d::multiview::ViewSettings;
use ndarray::{Array4, Axis};
use proptest::prelude::*;

/// 10 x 10 scan of identical unit-flux patterns on a 32x32 detector.
fn unit_cube(h: usize) -> DataCube4D {
    let calib = ScanCalibration::default();
    let mut p = ndarray::Array2::<f64>::zeros((32, 32));
    let mask = ViewSettings::default().mask(&calib).unwrap();
    let n = mask.iter().filter(|&&m| m).count() as f64;
    for ((i, j), m) in mask.indexed_iter() {
        if *m {
            p[[i, j]] = 1.0 / n;
        }
    }
    let v = Array4::from_shape_fn((h, h, 32, 32), |(_, _, i, j)| p[[i, j]]);
    DataCube4D::new(v, calib, Layout::RealMajor, false).unwrap()
}

#[test]
fn mean_counts_match_dose_times_area() {
    let cube = unit_cube(10);
    let spec = DoseSpec::new(1000.0, 42);
    assert_eq!(spec.electrons_per_pattern(4.0), 16_000.0);
    let noisy = apply_dose(&cube, &spec).unwrap();
    let totals: Vec<f64> = noisy
        .values()
        .outer_iter()
        .flat_map(|row| row.outer_iter().map(|p| p.sum()).collect::<Vec<_>>())
        .collect();
    assert_eq!(totals.len(), 100);
    let mean = totals.iter().sum::<f64>() / 100.0;
    // 3σ of the mean is 3·√16000/10 ≈ 38, well inside 1%
    assert!((mean - 16_000.0).abs() < 160.0, "{mean}");
    assert!(noisy.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
}

#[test]
fn vanishing_means_give_zero_counts() {
    let mut cube = unit_cube(2).into_values();
    cube[[0, 0, 0, 0]] = 1e-36;
    cube[[0, 0, 16, 16]] -= 1e-36;
    let cube = DataCube4D::new(cube, ScanCalibration::default(), Layout::RealMajor, false).unwrap();
    for seed in 0..20 {
        let out = apply_dose(&cube, &DoseSpec::new(300.0, seed)).unwrap();
        assert_eq!(out.values()[[0, 0, 0, 0]], 0.0);
    }
}

#[test]
fn infinite_dose_is_exact_scaling() {
    let cube = unit_cube(3);
    let out = apply_dose(&cube, &DoseSpec::new(f64::INFINITY, 1)).unwrap();
    let n_e = NOMINAL_INFINITE_DOSE * 16.0;
    for (a, b) in out.values().iter().zip(cube.values()) {
        assert_eq!(*a, n_e * b);
    }
    assert!(!out.signed());
}

#[test]
fn expectation_preserved_per_pixel() {
    // E[out] = n_e·c + bias, checked with 3σ bounds on the pooled pixel mean
    let cube = unit_cube(20);
    let spec = DoseSpec {
        dose: Dose(50.0),
        gaussian_sigma: 2.0,
        bias: 3.0,
        seed: 9,
    };
    let out = apply_dose(&cube, &spec).unwrap();
    assert!(out.signed());
    let n_e = spec.electrons_per_pattern(4.0);
    let (qx, qy) = (16, 16);
    let clean = cube.values()[[0, 0, qx, qy]];
    let samples: Vec<f64> = out
        .values()
        .slice(ndarray::s![.., .., qx, qy])
        .iter()
        .copied()
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let expect = n_e * clean + 3.0;
    let sd = (n_e * clean + 4.0).sqrt() / n.sqrt();
    assert!(
        (mean - expect).abs() < 3.0 * sd,
        "{mean} vs {expect} ± {}",
        3.0 * sd
    );
}

#[test]
fn seeds_reproduce_and_differ() {
    let cube = unit_cube(4);
    let a = apply_dose(&cube, &DoseSpec::new(300.0, 1)).unwrap();
    let b = apply_dose(&cube, &DoseSpec::new(300.0, 1)).unwrap();
    let c = apply_dose(&cube, &DoseSpec::new(300.0, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn view_level_corruption_matches_cube_level_statistics() {
    let cube = unit_cube(24);
    let settings = ViewSettings::default();
    let raw = settings.extract(&cube).unwrap();
    let spec = DoseSpec {
        dose: Dose(200.0),
        gaussian_sigma: 1.5,
        bias: 0.5,
        seed: 3,
    };
    let fast = corrupt_views(&raw.views, raw.pixels_per_view, 4.0, &spec).unwrap();
    let slow = settings
        .extract(&apply_dose(&cube, &spec).unwrap())
        .unwrap()
        .views;
    let n = (24 * 24) as f64;
    for v in [0, 7, 15] {
        let f = fast.index_axis(Axis(0), v);
        let s = slow.index_axis(Axis(0), v);
        let (mf, ms) = (f.mean().unwrap(), s.mean().unwrap());
        let (vf, vs) = (f.var(0.0), s.var(0.0));
        let m = raw.pixels_per_view as f64;
        let expect_mean = 3200.0 * raw.views[[v, 0, 0]] + m * 0.5;
        let expect_var = 3200.0 * raw.views[[v, 0, 0]] + m * 1.5 * 1.5;
        let se = (expect_var / n).sqrt();
        assert!(
            (mf - expect_mean).abs() < 4.0 * se,
            "fast mean {mf} vs {expect_mean}"
        );
        assert!(
            (ms - expect_mean).abs() < 4.0 * se,
            "cube mean {ms} vs {expect_mean}"
        );
        // variance of a sample variance ≈ 2σ⁴/n for near-Gaussian counts
        let var_se = expect_var * (2.0 / n).sqrt();
        assert!(
            (vf - expect_var).abs() < 4.0 * var_se,
            "fast var {vf} vs {expect_var}"
        );
        assert!(
            (vs - expect_var).abs() < 4.0 * var_se,
            "cube var {vs} vs {expect_var}"
        );
    }
}

#[test]
fn log_uniform_median_is_geometric_mean() {
    let cfg = CorruptionConfig {
        sigma_max: 0.0,
        ..CorruptionConfig::default()
    };
    let mut logs: Vec<f64> = (0..10_000u64)
        .map(|i| sample_corruption(i % 7, i, &cfg).unwrap().dose.0.ln())
        .collect();
    logs.sort_by(f64::total_cmp);
    let median = 0.5 * (logs[4999] + logs[5000]);
    let target = (100.0f64 * 1000.0).sqrt().ln();
    assert!(
        (median - target).abs() / target < 0.02,
        "{median} vs {target}"
    );
    assert!(logs[0] >= 100f64.ln() && logs[9999] <= 1000f64.ln());
}

#[test]
fn degenerate_and_invalid_ranges() {
    let fixed = CorruptionConfig {
        dose_min: Dose(300.0),
        dose_max: Dose(300.0),
        ..CorruptionConfig::default()
    };
    for i in 0..20 {
        assert_eq!(sample_corruption(i, i, &fixed).unwrap().dose, Dose(300.0));
    }
    let bad = CorruptionConfig {
        dose_min: Dose(0.0),
        ..CorruptionConfig::default()
    };
    assert!(matches!(
        sample_corruption(0, 0, &bad),
        Err(misr4d::Error::Config(_))
    ));
    let flipped = CorruptionConfig {
        dose_min: Dose(2000.0),
        ..CorruptionConfig::default()
    };
    assert!(flipped.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_is_pure_and_in_range(epoch in 0u64..1000, index in 0u64..1000, seed in any::<u64>()) {
        let cfg = CorruptionConfig { seed, ..CorruptionConfig::default() };
        let a = sample_corruption(epoch, index, &cfg).unwrap();
        prop_assert_eq!(a, sample_corruption(epoch, index, &cfg).unwrap());
        prop_assert!(a.dose.0 >= 100.0 && a.dose.0 <= 1000.0);
        prop_assert!(a.gaussian_sigma >= 0.0 && a.gaussian_sigma <= 0.5);
        let next = sample_corruption(epoch + 1, index, &cfg).unwrap();
        prop_assert_ne!(a.seed, next.seed);
    }

    #[test]
    fn poisson_output_is_counts(dose in 1.0f64..2000.0, seed in any::<u64>()) {
        let out = apply_dose(&unit_cube(2), &DoseSpec::new(dose, seed)).unwrap();
        prop_assert!(out.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        prop_assert!(!out.signed());
    }
}
