//! Virtual bright-field views and the flux identity they obey.

use misr4d::baselines::bf_sum;
use misr4d::datacube::ScanCalibration;
use misr4d::multiview::{normalize_views, ViewSettings};
use misr4d::pipeline::simulate_sample;
use misr4d::simulator::{AmorphousParams, PhantomKind, PhantomRecipe};
use ndarray::Axis;

fn main() -> misr4d::Result<()> {
    let recipe = PhantomRecipe {
        kind: PhantomKind::Amorphous(AmorphousParams {
            n_atoms: 120,
            min_spacing: 4.0,
            amplitude: 0.5,
            sigma: 1.0,
            max_retries: 100_000,
        }),
        seed: 3,
        margin: None,
    };
    let calib = ScanCalibration::default();
    let (cube, _) = simulate_sample(&recipe, &calib, (16, 16), 3)?;

    let settings = ViewSettings::default();
    let stack = settings.extract(&cube)?;
    println!(
        "{} views of {:?}, {} detector pixels each",
        stack.len(),
        stack.scan_shape(),
        stack.pixels_per_view
    );
    for (v, (tx, ty)) in stack.angles.iter().enumerate().take(4) {
        println!("  view {v}: ({tx:+.2}, {ty:+.2}) mrad");
    }

    // with bin 1 every masked pixel is its own view
    let single = ViewSettings { bin: 1, ..settings };
    let all = single.extract(&cube)?.views.sum_axis(Axis(0));
    let disk = bf_sum(&cube, &single.mask(&calib)?)?;
    let err = (&all - &disk).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("sum of views vs disk sum: max difference {err:.2e}");

    let normed = normalize_views(&stack)?;
    println!(
        "normalized view 0 mean {:.6}",
        normed.views.index_axis(Axis(0), 0).mean().unwrap()
    );
    Ok(())
}
