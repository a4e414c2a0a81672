//! Classical reconstructions: bright-field sum, integrated DPC and parallax alignment.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::datacube::DataCube4D;
use crate::error::{Error, Result};
use crate::fft::{fftfreq, Fft2};
use crate::multiview::ViewStack;
use crate::resample::{sample_bicubic, upsample_bicubic, upsampled_coord};
use crate::simulator::electron_wavelength;

/// Per-position sum over the detector pixels selected by `mask`.
pub fn bf_sum(cube: &DataCube4D, mask: &Array2<bool>) -> Result<Array2<f64>> {
    if mask.dim() != cube.detector_shape() {
        return Err(Error::Geometry(format!(
            "mask {:?} does not fit detector {:?}",
            mask.dim(),
            cube.detector_shape()
        )));
    }
    let pixels: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(q, _)| q)
        .collect();
    if pixels.is_empty() {
        return Err(Error::NoBrightField);
    }
    let real = cube.to_real_major();
    let v = real.values();
    let (h, w) = cube.scan_shape();
    Ok(Array2::from_shape_fn((h, w), |(rx, ry)| {
        pixels.iter().map(|&(qx, qy)| v[[rx, ry, qx, qy]]).sum()
    }))
}

/// [`bf_sum`] resampled bicubically onto the `(rH, rW)` output grid.
pub fn bf_sum_upsampled(cube: &DataCube4D, mask: &Array2<bool>, r: usize) -> Result<Array2<f64>> {
    Ok(upsample_bicubic(&bf_sum(cube, mask)?, r))
}

/// Centre-of-mass deflection per probe position, in mrad from the calibrated centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ComMap {
    pub com_x: Array2<f64>,
    pub com_y: Array2<f64>,
    /// Positions whose pattern had no positive intensity; their deflection is zero.
    pub empty_patterns: usize,
}

pub fn com_map(cube: &DataCube4D) -> ComMap {
    let real = cube.to_real_major();
    let calib = cube.calib();
    let (h, w) = cube.scan_shape();
    let mut com_x = Array2::zeros((h, w));
    let mut com_y = Array2::zeros((h, w));
    let mut empty = 0;
    for (rx, row) in real.values().outer_iter().enumerate() {
        for (ry, pat) in row.outer_iter().enumerate() {
            let mut total = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for ((qx, qy), &v) in pat.indexed_iter() {
                total += v;
                sx += qx as f64 * v;
                sy += qy as f64 * v;
            }
            if total > 0.0 && total.is_finite() {
                com_x[[rx, ry]] = (sx / total - calib.center.0) * calib.detector_pixel;
                com_y[[rx, ry]] = (sy / total - calib.center.1) * calib.detector_pixel;
            } else {
                empty += 1;
            }
        }
    }
    ComMap {
        com_x,
        com_y,
        empty_patterns: empty,
    }
}

/// Fourier integration of a CoM field into a phase image in rad.
///
/// A deflection θ corresponds to a phase gradient `2πθ/λ`; the periodic
/// inverse gradient drops the zero-frequency term, so the result has zero mean.
pub fn integrate_com(com: &ComMap, step: f64, wavelength: f64) -> Array2<f64> {
    let (h, w) = com.com_x.dim();
    let scale = 2.0 * std::f64::consts::PI * 1e-3 / wavelength;
    let mut gx = com.com_x.mapv(|v| Complex64::new(v * scale, 0.0));
    let mut gy = com.com_y.mapv(|v| Complex64::new(v * scale, 0.0));
    let mut fft = Fft2::new(h, w);
    fft.forward(&mut gx);
    fft.forward(&mut gy);
    let kx = fftfreq(h, step);
    let ky = fftfreq(w, step);
    let two_pi_i = Complex64::new(0.0, 2.0 * std::f64::consts::PI);
    let mut phase = Array2::<Complex64>::zeros((h, w));
    for ((i, j), v) in phase.indexed_iter_mut() {
        let k2 = kx[i] * kx[i] + ky[j] * ky[j];
        if k2 > 0.0 {
            *v = (gx[[i, j]] * kx[i] + gy[[i, j]] * ky[j]) / (two_pi_i * k2);
        }
    }
    fft.inverse(&mut phase);
    let mut out = phase.mapv(|v| v.re);
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| v - mean);
    out
}

/// Integrated differential phase contrast image `(H, W)` plus the empty-pattern count.
pub fn idpc(cube: &DataCube4D) -> (Array2<f64>, usize) {
    let com = com_map(cube);
    let calib = cube.calib();
    let img = integrate_com(&com, calib.step_size, electron_wavelength(calib.energy));
    (img, com.empty_patterns)
}

/// Result of [`phase_cross_correlation`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    /// `moving(r - shift) ≈ reference(r)`, in pixels.
    pub shift: (f64, f64),
    /// Correlation peak over the RMS of the correlation surface.
    pub confidence: f64,
}

fn signed_index(i: usize, n: usize) -> f64 {
    if i > n / 2 {
        i as f64 - n as f64
    } else {
        i as f64
    }
}

/// Phase-normalized cross-correlation with matrix-DFT refinement of the peak
/// to `1/upsample` pixel.
pub fn phase_cross_correlation(
    reference: &Array2<f64>,
    moving: &Array2<f64>,
    upsample: usize,
) -> Result<Registration> {
    if reference.dim() != moving.dim() {
        return Err(Error::Shape(format!(
            "registration needs equal shapes, got {:?} and {:?}",
            reference.dim(),
            moving.dim()
        )));
    }
    let (h, w) = reference.dim();
    let mut f = reference.mapv(|v| Complex64::new(v, 0.0));
    let mut g = moving.mapv(|v| Complex64::new(v, 0.0));
    let mut fft = Fft2::new(h, w);
    fft.forward(&mut f);
    fft.forward(&mut g);
    let eps = 100.0 * f64::EPSILON;
    let mut cross = Array2::<Complex64>::zeros((h, w));
    for ((i, j), v) in cross.indexed_iter_mut() {
        let p = f[[i, j]] * g[[i, j]].conj();
        *v = p / p.norm().max(eps);
    }
    let mut cc = cross.clone();
    fft.inverse(&mut cc);
    let mags = cc.mapv(|v| v.norm());
    let (mut pi, mut pj, mut peak) = (0, 0, f64::NEG_INFINITY);
    for ((i, j), &m) in mags.indexed_iter() {
        if m > peak {
            (pi, pj, peak) = (i, j, m);
        }
    }
    let rms = (mags.iter().map(|m| m * m).sum::<f64>() / mags.len() as f64).sqrt();
    let mut shift = (signed_index(pi, h), signed_index(pj, w));
    let confidence = if rms > 0.0 { peak / rms } else { 0.0 };
    if upsample > 1 {
        let up = upsample as f64;
        let region = (1.5 * up).ceil() as usize;
        let centre = (region / 2) as f64;
        let sx: Vec<f64> = (0..region)
            .map(|o| shift.0 + (o as f64 - centre) / up)
            .collect();
        let sy: Vec<f64> = (0..region)
            .map(|o| shift.1 + (o as f64 - centre) / up)
            .collect();
        let fx: Vec<f64> = (0..h).map(|i| signed_index(i, h)).collect();
        let fy: Vec<f64> = (0..w).map(|j| signed_index(j, w)).collect();
        let two_pi = 2.0 * std::f64::consts::PI;
        // cc(x, y) = Σ R[k] exp(2πi (kx x / h + ky y / w)), separably
        let ey: Vec<Vec<Complex64>> = sy
            .iter()
            .map(|&y| {
                fy.iter()
                    .map(|&k| Complex64::from_polar(1.0, two_pi * k * y / w as f64))
                    .collect()
            })
            .collect();
        let mut partial = Array2::<Complex64>::zeros((h, region));
        for i in 0..h {
            let row = cross.index_axis(Axis(0), i);
            for (p, e) in ey.iter().enumerate() {
                partial[[i, p]] = row.iter().zip(e).map(|(a, b)| a * b).sum();
            }
        }
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (o, &x) in sx.iter().enumerate() {
            let ex: Vec<Complex64> = fx
                .iter()
                .map(|&k| Complex64::from_polar(1.0, two_pi * k * x / h as f64))
                .collect();
            for p in 0..region {
                let v: Complex64 = (0..h).map(|i| ex[i] * partial[[i, p]]).sum();
                if v.norm() > best.2 {
                    best = (o, p, v.norm());
                }
            }
        }
        shift = (sx[best.0], sy[best.1]);
    }
    Ok(Registration { shift, confidence })
}

/// Mean-subtracted copy tapered by a separable Hann window, which keeps the
/// non-periodic image border out of the correlation.
pub fn hann_taper(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mean = img.mean().unwrap_or(0.0);
    let win = |i: usize, n: usize| {
        if n < 2 {
            1.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        (img[[i, j]] - mean) * win(i, h) * win(j, w)
    })
}

/// Measured alignment of one view against the axial view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewShift {
    pub angle_mrad: (f64, f64),
    /// `view(r) ≈ axial(r + shift)`, in scan pixels.
    pub shift: (f64, f64),
    pub confidence: f64,
    pub used: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallaxResult {
    /// `(rH, rW)` average of the aligned views.
    pub image: Array2<f64>,
    pub shifts: Vec<ViewShift>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallaxConfig {
    pub upscale: usize,
    pub upsample_factor: usize,
    /// Views whose correlation peak/RMS falls below this are dropped.
    pub min_confidence: f64,
    /// Taper views with [`hann_taper`] before registration.
    pub window: bool,
}

impl Default for ParallaxConfig {
    fn default() -> Self {
        Self {
            upscale: 3,
            upsample_factor: 10,
            min_confidence: 5.0,
            window: true,
        }
    }
}

/// Registers every view to the axial view, undoes the shifts on the
/// upsampled grid and averages.
pub fn parallax(stack: &ViewStack, cfg: &ParallaxConfig) -> Result<ParallaxResult> {
    if stack.len() < 2 {
        return Err(Error::InvalidParameter(
            "parallax needs at least two views".into(),
        ));
    }
    if cfg.upscale == 0 {
        return Err(Error::InvalidParameter("upscale must be >= 1".into()));
    }
    let axial_idx = stack.axial_index();
    let axial = stack.views.index_axis(Axis(0), axial_idx).to_owned();
    let prep = |v: &Array2<f64>| if cfg.window { hann_taper(v) } else { v.clone() };
    let axial_ref = prep(&axial);
    let (h, w) = stack.scan_shape();
    let r = cfg.upscale;
    let mut acc = Array2::<f64>::zeros((h * r, w * r));
    let mut used = 0usize;
    let mut shifts = Vec::with_capacity(stack.len());
    for (i, view) in stack.views.outer_iter().enumerate() {
        let view = view.to_owned();
        let reg = if i == axial_idx {
            Registration {
                shift: (0.0, 0.0),
                confidence: f64::INFINITY,
            }
        } else {
            phase_cross_correlation(&axial_ref, &prep(&view), cfg.upsample_factor)?
        };
        let ok = reg.confidence >= cfg.min_confidence;
        if ok {
            let (tx, ty) = reg.shift;
            for ((a, b), v) in acc.indexed_iter_mut() {
                *v += sample_bicubic(
                    &view,
                    upsampled_coord(a, r) - tx,
                    upsampled_coord(b, r) - ty,
                );
            }
            used += 1;
        }
        shifts.push(ViewShift {
            angle_mrad: stack.angles[i],
            shift: reg.shift,
            confidence: reg.confidence,
            used: ok,
        });
    }
    acc.mapv_inplace(|v| v / used as f64);
    Ok(ParallaxResult { image: acc, shifts })
}
