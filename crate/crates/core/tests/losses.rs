use misr4d::error::Error;
use misr4d::losses::*;
use misr4d::metrics;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0))
}

fn checker(n: usize, block: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| ((i / block + j / block) % 2) as f64)
}

#[test]
fn pixel_loss_examples() {
    let t = noise(16, 1);
    assert_eq!(pixel_loss(&t, &t).unwrap(), 0.0);
    let shifted = t.mapv(|v| v + 0.5);
    assert!((pixel_loss(&shifted, &t).unwrap() - 0.5).abs() < 1e-12);
    let a = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
    let b = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
    assert_eq!(pixel_loss(&a, &b).unwrap(), 0.5);
    assert!(matches!(pixel_loss(&a, &t), Err(Error::Shape(_))));
}

#[test]
fn ms_ssim_identity_and_inversion() {
    let cfg = LossConfig::default();
    let t = checker(192, 8);
    assert!(ms_ssim_loss(&t, &t, &cfg).unwrap().abs() < 1e-12);
    let inv = t.mapv(|v| 1.0 - v);
    assert!(ms_ssim_loss(&inv, &t, &cfg).unwrap() > 0.5);
}

#[test]
fn ms_ssim_symmetric_for_equal_range_pairs() {
    let cfg = LossConfig::default();
    let raw = noise(192, 2);
    let (lo, hi) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let a = raw.mapv(|v| (v - lo) / (hi - lo));
    let b = a.mapv(|v| 1.0 - v);
    let blur = Array2::from_shape_fn((192, 192), |(i, j)| {
        0.5 * (a[[i, j]] + a[[(i + 1) % 192, j]])
    });
    for other in [&b, &checker(192, 4)] {
        let ab = ms_ssim_loss(&a, other, &cfg).unwrap();
        let ba = ms_ssim_loss(other, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    }
    assert!(ms_ssim_loss(&blur, &a, &cfg).unwrap() > 0.0);
}

#[test]
fn ms_ssim_too_small_names_feasible_count() {
    let cfg = LossConfig::default();
    let t = noise(64, 3);
    let err = ms_ssim_loss(&t, &t, &cfg).unwrap_err().to_string();
    assert!(err.contains("at most 3"), "{err}");
    let err = ms_ssim_loss(&noise(8, 0), &noise(8, 1), &cfg)
        .unwrap_err()
        .to_string();
    assert!(err.contains("at most 0"), "{err}");
}

#[test]
fn single_scale_matches_metric_ssim() {
    let cfg = LossConfig {
        msssim_weights: vec![1.0],
        ..LossConfig::default()
    };
    let t = noise(40, 4);
    let p = Array2::from_shape_fn((40, 40), |(i, j)| {
        0.7 * t[[i, j]] + 0.3 * ((i + j) % 3) as f64 / 3.0
    });
    let loss = ms_ssim_loss(&p, &t, &cfg).unwrap();
    let ssim = metrics::ssim(&p, &t).unwrap();
    assert!(
        (loss - (1.0 - ssim)).abs() < 1e-6,
        "{loss} vs {}",
        1.0 - ssim
    );
}

#[test]
fn identity_perceptual_is_mse() {
    let a = noise(20, 5);
    let b = noise(20, 6);
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap();
    let p = perceptual_loss(&a, &b, Some(&IdentityExtractor)).unwrap();
    assert!((p - mse).abs() < 1e-12);
    assert!(matches!(
        perceptual_loss(&a, &b, None),
        Err(Error::ExtractorMissing)
    ));
}

#[test]
fn conv_stack_loads_and_runs() {
    let stack = ConvStack {
        layers: vec![ConvLayer {
            shape: [2, 3, 1, 1],
            weight: vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0],
            bias: vec![0.0, 0.0],
            relu: false,
        }],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex.json");
    std::fs::write(&path, serde_json::to_string(&stack).unwrap()).unwrap();
    let loaded = ConvStack::load(&path).unwrap();
    assert_eq!(loaded, stack);
    let a = noise(12, 7);
    let b = noise(12, 8);
    // channels are copies, so the features are x and 2x
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap();
    let p = perceptual_loss(&a, &b, Some(&loaded)).unwrap();
    assert!((p - 2.5 * mse).abs() < 1e-12);

    let mut bad = stack.clone();
    bad.layers[0].weight.pop();
    std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    assert!(ConvStack::load(&path).is_err());
}

#[test]
fn branch_routing_and_missing_extractor() {
    let cfg = LossConfig::default();
    let a = noise(64, 9);
    let b = noise(64, 10);
    let low = composite_loss(&a, &b, 0.5, &cfg, Some(&IdentityExtractor)).unwrap();
    assert_eq!(low.branch, Branch::WithPerceptual);
    let at = composite_loss(&a, &b, 1.0, &cfg, None).unwrap();
    assert_eq!(at.branch, Branch::WithoutPerceptual);
    assert_eq!(at.perceptual, None);
    assert!(matches!(
        composite_loss(&a, &b, 0.5, &cfg, None),
        Err(Error::ExtractorMissing)
    ));
    assert!(composite_loss(&a, &b, 0.0, &cfg, None).is_err());
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = LossConfig {
        msssim_weights: vec![0.5, 0.4],
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        lambda: -1.0,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    let parsed: LossConfig = serde_json::from_str(r#"{"lambda": 0.01}"#).unwrap();
    assert_eq!(parsed.window, 11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn composite_is_term_sum(seed in 0u64..10_000, step in 0.1f64..4.0) {
        let cfg = LossConfig::default();
        let a = noise(64, seed);
        let b = noise(64, seed + 1);
        let r = composite_loss(&a, &b, step, &cfg, Some(&IdentityExtractor)).unwrap();
        let expect = r.pixel + r.ssim + cfg.lambda * r.perceptual.unwrap_or(0.0);
        prop_assert!((r.total - expect).abs() < 1e-12);
        prop_assert_eq!(r.perceptual.is_some(), step < 1.0);
        prop_assert!(r.pixel >= 0.0 && r.ssim >= 0.0);
        let same = composite_loss(&a, &a, step, &cfg, Some(&IdentityExtractor)).unwrap();
        prop_assert!(same.total.abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_symmetric_nonnegative(seed in 0u64..10_000) {
        let a = noise(12, seed);
        let b = noise(12, seed + 7);
        let ab = pixel_loss(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, pixel_loss(&b, &a).unwrap());
    }
}
