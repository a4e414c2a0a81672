//! Shot noise at a chosen dose, and the per-epoch training sampler.

use misr4d::corruption::{apply_dose, sample_corruption, CorruptionConfig, DoseSpec};
use misr4d::datacube::ScanCalibration;
use misr4d::pipeline::simulate_sample;
use misr4d::simulator::{PhantomKind, PhantomRecipe, SinusoidParams};

fn main() -> misr4d::Result<()> {
    let recipe = PhantomRecipe {
        kind: PhantomKind::Sinusoid(SinusoidParams {
            period: 12.0,
            amplitude: 0.3,
            angle_deg: 30.0,
        }),
        seed: 0,
        margin: None,
    };
    let calib = ScanCalibration::default();
    let (clean, _) = simulate_sample(&recipe, &calib, (8, 8), 3)?;
    for dose in [100.0, 1000.0] {
        let noisy = apply_dose(&clean, &DoseSpec::new(dose, 7))?;
        let mean = noisy.values().sum() / 64.0;
        println!(
            "dose {dose:>6}: {mean:.0} counts per pattern (expected {})",
            dose * 16.0
        );
    }

    let cfg = CorruptionConfig::default();
    for epoch in 0..3 {
        let spec = sample_corruption(epoch, 0, &cfg)?;
        println!(
            "epoch {epoch}: dose {:.1}, sigma {:.3}",
            spec.dose.0, spec.gaussian_sigma
        );
    }
    Ok(())
}
