//! Bright-field sum, iDPC and parallax reconstructions of one noisy scan.

use misr4d::corruption::{apply_dose, DoseSpec};
use misr4d::datacube::ScanCalibration;
use misr4d::metrics::score;
use misr4d::multiview::ViewSettings;
use misr4d::pipeline::{run_baseline, simulate_sample, Method};
use misr4d::simulator::{AmorphousParams, PhantomKind, PhantomRecipe};

fn main() -> misr4d::Result<()> {
    let recipe = PhantomRecipe {
        kind: PhantomKind::Amorphous(AmorphousParams {
            n_atoms: 500,
            min_spacing: 4.0,
            amplitude: 0.5,
            sigma: 1.0,
            max_retries: 100_000,
        }),
        seed: 11,
        margin: None,
    };
    let calib = ScanCalibration::default();
    let (clean, gt) = simulate_sample(&recipe, &calib, (32, 32), 3)?;
    let noisy = apply_dose(&clean, &DoseSpec::new(1000.0, 1))?;
    for method in [Method::BfSum, Method::Idpc, Method::Parallax] {
        let img = run_baseline(method, &noisy, &ViewSettings::default(), 3)?;
        let s = score(&img, &gt.phase, gt.pixel_size)?;
        println!(
            "{:<9} psnr {:.2} dB  ssim {:.3}  cnr {:.2}",
            method.name(),
            s.psnr,
            s.ssim,
            s.cnr
        );
    }
    Ok(())
}
