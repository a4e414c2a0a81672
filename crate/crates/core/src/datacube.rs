//! The 4D datacube, its calibration, domain interconversion and pattern recentering.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition geometry shared by every diffraction pattern in a scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanCalibration {
    /// Real-space distance between adjacent probe positions, in Å.
    pub step_size: f64,
    /// Beam energy in keV.
    pub energy: f64,
    /// Probe convergence semi-angle in mrad.
    pub convergence: f64,
    /// Probe defocus in Å.
    pub defocus: f64,
    /// Angular size of one detector pixel in mrad.
    pub detector_pixel: f64,
    /// Detector pixel counts `(Kx, Ky)`.
    pub detector_shape: (usize, usize),
    /// Fractional detector pixel of the unscattered beam `(cx, cy)`.
    pub center: (f64, f64),
}

impl Default for ScanCalibration {
    /// 300 keV, 10 mrad, 1500 Å defocus and 4 Å steps on a 32x32 detector
    /// centred between the four middle pixels.
    fn default() -> Self {
        Self {
            step_size: 4.0,
            energy: 300.0,
            convergence: 10.0,
            defocus: 1500.0,
            detector_pixel: 0.8,
            detector_shape: (32, 32),
            center: (15.5, 15.5),
        }
    }
}

impl ScanCalibration {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(self.energy > 0.0) {
            return bad("energy must be > 0");
        }
        if !(self.convergence > 0.0) {
            return bad("convergence must be > 0");
        }
        if !(self.detector_pixel > 0.0) {
            return bad("detector_pixel must be > 0");
        }
        if !self.defocus.is_finite() {
            return bad("defocus must be finite");
        }
        let (kx, ky) = self.detector_shape;
        let (cx, cy) = self.center;
        if !(cx >= 0.0 && cx < kx as f64 && cy >= 0.0 && cy < ky as f64) {
            return bad("detector center must lie on the detector");
        }
        Ok(())
    }

    /// Detector coordinate of pixel `(qx, qy)` as an angle `(θx, θy)` in mrad from the center.
    pub fn pixel_angle(&self, qx: f64, qy: f64) -> (f64, f64) {
        (
            (qx - self.center.0) * self.detector_pixel,
            (qy - self.center.1) * self.detector_pixel,
        )
    }
}

/// Axis order of the stored array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `(Rx, Ry, Qx, Qy)`: one diffraction pattern per probe position.
    RealMajor,
    /// `(Qx, Qy, Rx, Ry)`: one real-space image per detector pixel.
    RecipMajor,
}

impl Layout {
    pub fn tag(self) -> &'static str {
        match self {
            Layout::RealMajor => "RQ",
            Layout::RecipMajor => "QR",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "RQ" => Ok(Layout::RealMajor),
            "QR" => Ok(Layout::RecipMajor),
            other => Err(Error::Config(format!("unknown layout tag {other:?}"))),
        }
    }
}

/// 4D-STEM measurement plus calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCube4D {
    values: Array4<f64>,
    calib: ScanCalibration,
    layout: Layout,
    signed: bool,
}

impl DataCube4D {
    /// Validates the detector shape against the calibration and rejects
    /// negative values unless `signed` is set.
    pub fn new(
        values: Array4<f64>,
        calib: ScanCalibration,
        layout: Layout,
        signed: bool,
    ) -> Result<Self> {
        calib.validate()?;
        let s = values.shape();
        let det = match layout {
            Layout::RealMajor => (s[2], s[3]),
            Layout::RecipMajor => (s[0], s[1]),
        };
        if det != calib.detector_shape {
            return Err(Error::Geometry(format!(
                "array detector dims {det:?} do not match calibration {:?}",
                calib.detector_shape
            )));
        }
        if !signed && values.iter().any(|v| *v < 0.0 || v.is_nan()) {
            return Err(Error::InvalidParameter(
                "negative or NaN values in an unsigned datacube".into(),
            ));
        }
        Ok(Self {
            values,
            calib,
            layout,
            signed,
        })
    }

    pub(crate) fn from_parts_unchecked(
        values: Array4<f64>,
        calib: ScanCalibration,
        layout: Layout,
        signed: bool,
    ) -> Self {
        Self {
            values,
            calib,
            layout,
            signed,
        }
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn calib(&self) -> &ScanCalibration {
        &self.calib
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// True when additive Gaussian corruption may have produced negative values.
    pub fn signed(&self) -> bool {
        self.signed
    }

    /// `(Rx, Ry)` regardless of layout.
    pub fn scan_shape(&self) -> (usize, usize) {
        let s = self.values.shape();
        match self.layout {
            Layout::RealMajor => (s[0], s[1]),
            Layout::RecipMajor => (s[2], s[3]),
        }
    }

    pub fn detector_shape(&self) -> (usize, usize) {
        self.calib.detector_shape
    }

    /// Diffraction pattern at probe position `(rx, ry)`.
    pub fn pattern(&self, rx: usize, ry: usize) -> Array2<f64> {
        match self.layout {
            Layout::RealMajor => self
                .values
                .index_axis(Axis(0), rx)
                .index_axis(Axis(0), ry)
                .to_owned(),
            Layout::RecipMajor => {
                let (kx, ky) = self.calib.detector_shape;
                Array2::from_shape_fn((kx, ky), |(qx, qy)| self.values[[qx, qy, rx, ry]])
            }
        }
    }

    /// Real-space image recorded by detector pixel `(qx, qy)`.
    pub fn detector_image(&self, qx: usize, qy: usize) -> Array2<f64> {
        match self.layout {
            Layout::RecipMajor => self
                .values
                .index_axis(Axis(0), qx)
                .index_axis(Axis(0), qy)
                .to_owned(),
            Layout::RealMajor => {
                let (h, w) = self.scan_shape();
                Array2::from_shape_fn((h, w), |(rx, ry)| self.values[[rx, ry, qx, qy]])
            }
        }
    }

    /// Same cube in `RealMajor` layout (cheap clone when already real-major).
    pub fn to_real_major(&self) -> DataCube4D {
        match self.layout {
            Layout::RealMajor => self.clone(),
            Layout::RecipMajor => transpose_domains(self),
        }
    }

    /// Applies `f` to every pattern, producing a new real-major cube.
    fn map_patterns(&self, mut f: impl FnMut(ArrayView2<f64>) -> Array2<f64>) -> Array4<f64> {
        let real = self.to_real_major();
        let mut out = Array4::zeros(real.values.raw_dim());
        for (mut dst_row, src_row) in out.outer_iter_mut().zip(real.values.outer_iter()) {
            for (mut dst, src) in dst_row.outer_iter_mut().zip(src_row.outer_iter()) {
                dst.assign(&f(src));
            }
        }
        out
    }
}

/// Swaps real- and reciprocal-space axes: `out[qx][qy][rx][ry] = in[rx][ry][qx][qy]`.
pub fn transpose_domains(cube: &DataCube4D) -> DataCube4D {
    let values = cube
        .values
        .view()
        .permuted_axes([2, 3, 0, 1])
        .as_standard_layout()
        .into_owned();
    let layout = match cube.layout {
        Layout::RealMajor => Layout::RecipMajor,
        Layout::RecipMajor => Layout::RealMajor,
    };
    DataCube4D {
        values,
        calib: cube.calib.clone(),
        layout,
        signed: cube.signed,
    }
}

/// Probe-position-averaged diffraction pattern.
pub fn mean_pattern(cube: &DataCube4D) -> Array2<f64> {
    let (kx, ky) = cube.detector_shape();
    let (h, w) = cube.scan_shape();
    let mut acc = Array2::<f64>::zeros((kx, ky));
    match cube.layout {
        Layout::RealMajor => {
            for row in cube.values.outer_iter() {
                for p in row.outer_iter() {
                    acc += &p;
                }
            }
        }
        Layout::RecipMajor => {
            for ((qx, qy), v) in acc.indexed_iter_mut() {
                *v = cube
                    .values
                    .index_axis(Axis(0), qx)
                    .index_axis(Axis(0), qy)
                    .sum();
            }
        }
    }
    acc / (h * w) as f64
}

/// Intensity center of mass `(x, y)` of a 2-D array, in pixel coordinates.
pub(crate) fn center_of_mass(p: ArrayView2<f64>) -> Option<(f64, f64)> {
    let mut total = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for ((i, j), v) in p.indexed_iter() {
        total += v;
        sx += i as f64 * v;
        sy += j as f64 * v;
    }
    if total == 0.0 || !total.is_finite() {
        None
    } else {
        Some((sx / total, sy / total))
    }
}

/// Center of mass of the mean diffraction pattern.
pub fn estimate_center(cube: &DataCube4D) -> Result<(f64, f64)> {
    center_of_mass(mean_pattern(cube).view()).ok_or(Error::EmptyDatacube)
}

/// Circularly shifts a pattern by `(dx, dy)` pixels: integer part by index
/// rotation, fractional part by bilinear interpolation.
pub fn shift_pattern(p: ArrayView2<f64>, dx: f64, dy: f64) -> Array2<f64> {
    let (kx, ky) = p.dim();
    let ix = dx.floor();
    let iy = dy.floor();
    let (fx, fy) = (dx - ix, dy - iy);
    let (ix, iy) = (ix as isize, iy as isize);
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    Array2::from_shape_fn((kx, ky), |(qx, qy)| {
        let x0 = wrap(qx as isize - ix, kx);
        let x1 = wrap(qx as isize - ix - 1, kx);
        let y0 = wrap(qy as isize - iy, ky);
        let y1 = wrap(qy as isize - iy - 1, ky);
        let mut v = (1.0 - fx) * (1.0 - fy) * p[[x0, y0]];
        if fx != 0.0 {
            v += fx * (1.0 - fy) * p[[x1, y0]];
        }
        if fy != 0.0 {
            v += (1.0 - fx) * fy * p[[x0, y1]];
            if fx != 0.0 {
                v += fx * fy * p[[x1, y1]];
            }
        }
        v
    })
}

/// Shifts every pattern so that the mean-pattern center of mass lands on `target`.
pub fn recenter(cube: &DataCube4D, target: (f64, f64)) -> Result<DataCube4D> {
    let current = estimate_center(cube)?;
    let (kx, ky) = cube.detector_shape();
    let dx = target.0 - current.0;
    let dy = target.1 - current.1;
    if dx.abs() > kx as f64 / 2.0 || dy.abs() > ky as f64 / 2.0 {
        return Err(Error::CenterOutOfRange { dx, dy });
    }
    let values = cube.map_patterns(|p| shift_pattern(p, dx, dy));
    let mut calib = cube.calib.clone();
    calib.center = target;
    calib.validate()?;
    Ok(DataCube4D {
        values,
        calib,
        layout: Layout::RealMajor,
        signed: cube.signed,
    })
}

/// Resamples every pattern under `q_out = c + M (q_in - c) + t`, where `c` is
/// the calibrated center, `M` the left 2x2 block of `matrix` and `t` its last
/// column. Bilinear interpolation; samples falling off the detector are zero.
pub fn apply_affine(cube: &DataCube4D, matrix: [[f64; 3]; 2]) -> Result<DataCube4D> {
    let [[a, b, tx], [c, d, ty]] = matrix;
    let det = a * d - b * c;
    if !(det.abs() > 1e-12) {
        return Err(Error::DegenerateAffine(det));
    }
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let (cx, cy) = cube.calib.center;
    let (kx, ky) = cube.detector_shape();
    // Precompute source coordinates once; every pattern shares them.
    let mut taps: Vec<[(usize, usize, f64); 4]> = Vec::with_capacity(kx * ky);
    for qx in 0..kx {
        for qy in 0..ky {
            let ux = qx as f64 - cx - tx;
            let uy = qy as f64 - cy - ty;
            let sx = snap(cx + inv[0][0] * ux + inv[0][1] * uy);
            let sy = snap(cy + inv[1][0] * ux + inv[1][1] * uy);
            taps.push(bilinear_taps(sx, sy, kx, ky));
        }
    }
    let values = cube.map_patterns(|p| {
        let mut out = Array2::zeros((kx, ky));
        for ((q, v), t) in out.iter_mut().enumerate().zip(&taps) {
            let _ = q;
            let mut acc = 0.0;
            for &(i, j, w) in t {
                if w != 0.0 {
                    acc += w * p[[i, j]];
                }
            }
            *v = acc;
        }
        out
    });
    Ok(DataCube4D {
        values,
        calib: cube.calib.clone(),
        layout: Layout::RealMajor,
        signed: cube.signed,
    })
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear taps at `(x, y)`; out-of-range neighbours get zero weight.
fn bilinear_taps(x: f64, y: f64, kx: usize, ky: usize) -> [(usize, usize, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut taps = [(0, 0, 0.0); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, (i, j, w)) in taps.iter_mut().zip(corners) {
        if w != 0.0 && i >= 0.0 && j >= 0.0 && (i as usize) < kx && (j as usize) < ky {
            *slot = (i as usize, j as usize, w);
        }
    }
    taps
}
