//! PSNR, SSIM, CNR, line profiles and the spectral cutoff.

use misr4d::metrics::{cnr, line_profile, psnr, quartile_masks, spectral_cutoff, ssim};
use ndarray::Array2;

fn main() -> misr4d::Result<()> {
    let px = 0.5;
    let period = 8.0;
    let truth = Array2::from_shape_fn((64, 64), |(i, _)| {
        (2.0 * std::f64::consts::PI * i as f64 * px / period).cos()
    });
    let blurred = truth.mapv(|v| 0.7 * v);

    println!(
        "psnr {:.2} dB, ssim {:.3}",
        psnr(&blurred, &truth)?,
        ssim(&blurred, &truth)?
    );
    let (signal, background) = quartile_masks(&truth)?;
    println!("cnr {:.2}", cnr(&blurred, &signal, &background)?);

    let prof = line_profile(&truth, (0.0, 10.0), (15.0, 10.0), 16)?;
    println!(
        "profile {:?}",
        prof.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>()
    );

    let cut = spectral_cutoff(&truth, px, 3.0)?;
    println!(
        "cutoff {:.3} 1/A (signal at {:.3})",
        cut.cutoff,
        1.0 / period
    );
    Ok(())
}
