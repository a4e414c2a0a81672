//! Domain interconversion and pattern recentering.

use misr4d::datacube::{
    estimate_center, recenter, transpose_domains, DataCube4D, Layout, ScanCalibration,
};
use ndarray::Array4;

fn main() -> misr4d::Result<()> {
    let calib = ScanCalibration {
        detector_shape: (16, 16),
        center: (7.5, 7.5),
        ..ScanCalibration::default()
    };
    // a bright disk drifting across the detector
    let values = Array4::from_shape_fn((4, 4, 16, 16), |(rx, _, qx, qy)| {
        let (cx, cy) = (6.0 + 0.5 * rx as f64, 8.0);
        let d2 = (qx as f64 - cx).powi(2) + (qy as f64 - cy).powi(2);
        if d2 < 9.0 {
            1.0
        } else {
            0.0
        }
    });
    let cube = DataCube4D::new(values, calib, Layout::RealMajor, false)?;

    let recip = transpose_domains(&cube);
    println!(
        "{:?} -> {:?}",
        cube.values().shape(),
        recip.values().shape()
    );
    assert_eq!(transpose_domains(&recip), cube);

    let c = estimate_center(&cube)?;
    println!("mean centre of mass ({:.2}, {:.2})", c.0, c.1);
    let fixed = recenter(&cube, (7.5, 7.5))?;
    println!(
        "after recentering ({:.2}, {:.2})",
        estimate_center(&fixed)?.0,
        estimate_center(&fixed)?.1
    );
    Ok(())
}
