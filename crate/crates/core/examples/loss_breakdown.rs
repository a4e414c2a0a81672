//! The composite objective on both sides of the step-size threshold.

use misr4d::losses::{composite_loss, ms_ssim_loss, IdentityExtractor, LossConfig};
use ndarray::Array2;

fn main() -> misr4d::Result<()> {
    let cfg = LossConfig::default();
    let target = Array2::from_shape_fn((96, 96), |(i, j)| {
        (i as f64 / 5.0).sin() * (j as f64 / 7.0).cos()
    });
    let pred = target.mapv(|v| 0.8 * v + 0.05);

    for step in [0.5, 4.0] {
        let b = composite_loss(&pred, &target, step, &cfg, Some(&IdentityExtractor))?;
        println!(
            "step {step} A: {:?} pixel {:.4} ssim {:.4} perceptual {:?} total {:.4}",
            b.branch, b.pixel, b.ssim, b.perceptual, b.total
        );
    }
    match ms_ssim_loss(&pred, &target, &cfg) {
        Ok(v) => println!("5-scale ms-ssim loss {v:.4}"),
        Err(e) => println!("ms-ssim: {e}"),
    }
    Ok(())
}
