//! Simulate a clean scan of a small crystal and save it as a container.

use misr4d::datacube::ScanCalibration;
use misr4d::pipeline::simulate_sample;
use misr4d::simulator::{CrystalParams, PhantomKind, PhantomRecipe};

fn main() -> misr4d::Result<()> {
    let calib = ScanCalibration::default();
    let recipe = PhantomRecipe {
        kind: PhantomKind::Crystal(CrystalParams::square(6.0, 0.5, 1.0)),
        seed: 1,
        margin: None,
    };
    let (cube, gt) = simulate_sample(&recipe, &calib, (16, 16), 3)?;
    let total: f64 = cube.pattern(0, 0).sum();
    println!("cube {:?}, pattern flux {total:.6}", cube.values().shape());
    println!(
        "ground truth {:?} at {:.3} A/px",
        gt.phase.dim(),
        gt.pixel_size
    );

    let path = std::env::temp_dir().join("misr4d_example_scan.h5");
    misr4d::io::save_cube(&path, &cube)?;
    misr4d::io::save_ground_truth(&path, &gt)?;
    println!("wrote {}", path.display());
    Ok(())
}
