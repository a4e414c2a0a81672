//! Virtual bright-field view stacks: one low-resolution image per detector cell.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::datacube::{DataCube4D, Layout, ScanCalibration};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    PerViewMean,
}

/// `V` real-space images, each tagged with the detector angle it was recorded at.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStack {
    /// `(V, H, W)`.
    pub views: Array3<f64>,
    /// `(θx, θy)` in mrad relative to the beam centre.
    pub angles: Vec<(f64, f64)>,
    pub calib: ScanCalibration,
    pub normalization: Normalization,
    /// Detector pixels summed into each view.
    pub pixels_per_view: usize,
}

impl ViewStack {
    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn scan_shape(&self) -> (usize, usize) {
        let s = self.views.shape();
        (s[1], s[2])
    }

    /// Index of the view closest to the optical axis.
    pub fn axial_index(&self) -> usize {
        let mut best = 0;
        let mut best_r = f64::INFINITY;
        for (i, (x, y)) in self.angles.iter().enumerate() {
            let r = x * x + y * y;
            if r < best_r {
                best = i;
                best_r = r;
            }
        }
        best
    }
}

/// View extraction recipe stored with datasets and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSettings {
    pub radius_fraction: f64,
    pub bin: usize,
}

impl Default for ViewSettings {
    /// 16 views on the default calibration.
    fn default() -> Self {
        Self {
            radius_fraction: 0.9,
            bin: 4,
        }
    }
}

impl ViewSettings {
    pub fn mask(&self, calib: &ScanCalibration) -> Result<Array2<bool>> {
        bf_mask(calib, self.radius_fraction)
    }

    /// Number of views this recipe yields on `calib`.
    pub fn count(&self, calib: &ScanCalibration) -> Result<usize> {
        Ok(view_blocks(calib, &self.mask(calib)?, self.bin)?.len())
    }

    /// Raw (unnormalized) views of `cube`.
    pub fn extract(&self, cube: &DataCube4D) -> Result<ViewStack> {
        extract_views(cube, &self.mask(cube.calib())?, self.bin)
    }
}

/// Detector pixels whose angle from the centre is within `radius_fraction · α`.
pub fn bf_mask(calib: &ScanCalibration, radius_fraction: f64) -> Result<Array2<bool>> {
    if !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "radius_fraction must be in (0, 1], got {radius_fraction}"
        )));
    }
    let limit = radius_fraction * calib.convergence;
    let mask = Array2::from_shape_fn(calib.detector_shape, |(qx, qy)| {
        let (tx, ty) = calib.pixel_angle(qx as f64, qy as f64);
        (tx * tx + ty * ty).sqrt() <= limit * (1.0 + 1e-12)
    });
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoBrightField);
    }
    Ok(mask)
}

/// Top-left pixels of the `bin × bin` blocks lying wholly inside `mask`.
///
/// Block edges are anchored on the pixel boundary nearest the beam centre.
pub fn view_blocks(
    calib: &ScanCalibration,
    mask: &Array2<bool>,
    bin: usize,
) -> Result<Vec<(usize, usize)>> {
    if bin == 0 {
        return Err(Error::InvalidParameter("bin must be >= 1".into()));
    }
    let (kx, ky) = mask.dim();
    if (kx, ky) != calib.detector_shape {
        return Err(Error::Geometry(format!(
            "mask {:?} does not fit detector {:?}",
            (kx, ky),
            calib.detector_shape
        )));
    }
    let first = |c: f64| ((c + 0.5).round() as isize).rem_euclid(bin as isize) as usize;
    let (fx, fy) = (first(calib.center.0), first(calib.center.1));
    let mut blocks = Vec::new();
    let mut sx = fx;
    while sx + bin <= kx {
        let mut sy = fy;
        while sy + bin <= ky {
            let inside = (sx..sx + bin).all(|i| (sy..sy + bin).all(|j| mask[[i, j]]));
            if inside {
                blocks.push((sx, sy));
            }
            sy += bin;
        }
        sx += bin;
    }
    if blocks.is_empty() {
        return Err(Error::BinningEliminatesViews(bin));
    }
    Ok(blocks)
}

/// Sums each masked `bin × bin` detector block over every probe position.
pub fn extract_views(cube: &DataCube4D, mask: &Array2<bool>, bin: usize) -> Result<ViewStack> {
    let calib = cube.calib();
    let blocks = view_blocks(calib, mask, bin)?;
    let (h, w) = cube.scan_shape();
    let values = cube.values();
    let mut views = Array3::<f64>::zeros((blocks.len(), h, w));
    let mut angles = Vec::with_capacity(blocks.len());
    let half = (bin as f64 - 1.0) / 2.0;
    for (v, &(sx, sy)) in blocks.iter().enumerate() {
        let mut view = views.index_axis_mut(Axis(0), v);
        for qx in sx..sx + bin {
            for qy in sy..sy + bin {
                match cube.layout() {
                    Layout::RealMajor => {
                        for rx in 0..h {
                            for ry in 0..w {
                                view[[rx, ry]] += values[[rx, ry, qx, qy]];
                            }
                        }
                    }
                    Layout::RecipMajor => {
                        view += &values.index_axis(Axis(0), qx).index_axis(Axis(0), qy);
                    }
                }
            }
        }
        angles.push(calib.pixel_angle(sx as f64 + half, sy as f64 + half));
    }
    Ok(ViewStack {
        views,
        angles,
        calib: calib.clone(),
        normalization: Normalization::Raw,
        pixels_per_view: bin * bin,
    })
}

/// Divides each view by its own mean. Already-normalized stacks pass through.
pub fn normalize_views(stack: &ViewStack) -> Result<ViewStack> {
    if stack.normalization == Normalization::PerViewMean {
        return Ok(stack.clone());
    }
    let mut out = stack.clone();
    for (i, mut view) in out.views.outer_iter_mut().enumerate() {
        let mean = view.mean().unwrap_or(0.0);
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::DeadView(i));
        }
        view.mapv_inplace(|x| x / mean);
    }
    out.normalization = Normalization::PerViewMean;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib(k: usize, center: f64, det_px: f64) -> ScanCalibration {
        ScanCalibration {
            detector_shape: (k, k),
            center: (center, center),
            detector_pixel: det_px,
            ..ScanCalibration::default()
        }
    }

    #[test]
    fn mask_radius_threshold() {
        let c = calib(32, 16.0, 1.0);
        let m = bf_mask(&c, 0.9).unwrap();
        assert!(m[[16, 16]]);
        assert!(m[[25, 16]]);
        assert!(!m[[26, 16]]);
        assert!(m[[16, 7]]);
        assert!(!m[[16, 6]]);
        for i in 0..32 {
            for j in 0..32 {
                let (ri, rj) = (32 - i, 32 - j);
                if ri < 32 && rj < 32 {
                    assert_eq!(m[[i, j]], m[[ri, rj]]);
                }
            }
        }
    }

    #[test]
    fn tiny_fraction_keeps_centre_pixel() {
        let c = calib(16, 8.0, 1.0);
        let m = bf_mask(&c, 0.01).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
        let off = ScanCalibration {
            center: (8.5, 8.5),
            ..c
        };
        assert!(matches!(bf_mask(&off, 0.01), Err(Error::NoBrightField)));
    }

    #[test]
    fn default_calibration_yields_sixteen_views() {
        let c = ScanCalibration::default();
        let m = bf_mask(&c, 0.9).unwrap();
        let blocks = view_blocks(&c, &m, 4).unwrap();
        assert_eq!(blocks.len(), 16);
    }

    #[test]
    fn oversize_bin_eliminates_views() {
        let c = calib(16, 8.0, 1.0);
        let m = bf_mask(&c, 0.2).unwrap();
        assert!(matches!(
            view_blocks(&c, &m, 4),
            Err(Error::BinningEliminatesViews(4))
        ));
    }

    #[test]
    fn normalize_constant_view() {
        let stack = ViewStack {
            views: Array3::from_elem((2, 3, 3), 5.0),
            angles: vec![(0.0, 0.0), (1.0, 0.0)],
            calib: ScanCalibration::default(),
            normalization: Normalization::Raw,
            pixels_per_view: 1,
        };
        let n = normalize_views(&stack).unwrap();
        assert!(n.views.iter().all(|&v| v == 1.0));
        assert_eq!(normalize_views(&n).unwrap(), n);
        let mut dead = stack;
        dead.views.index_axis_mut(Axis(0), 1).fill(0.0);
        assert!(matches!(normalize_views(&dead), Err(Error::DeadView(1))));
    }
}
