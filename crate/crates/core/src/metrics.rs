//! Image-quality scores, contrast measures, line profiles and power-spectrum
//! resolution estimates.

use ndarray::{Array1, Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftfreq, Fft2};
use crate::resample::sample_bilinear;

/// Side of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

fn value_range(img: &Array2<f64>) -> f64 {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

/// Peak signal-to-noise ratio in dB, with the target's range as peak.
///
/// Identical images give `f64::INFINITY`.
pub fn psnr(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let range = value_range(target);
    if !(range > 0.0) {
        return Err(Error::InvalidParameter(
            "psnr needs a non-constant target".into(),
        ));
    }
    let mse = Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t).powi(2))
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering with `k` along both axes.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h - n + 1, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * img[[i + t, j]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * rows[[i, j + t]])
            .sum::<f64>()
    })
}

/// Single-scale SSIM with an 11-tap, σ = 1.5 Gaussian window, averaged over
/// the valid region. The dynamic range is the target's (1 if constant).
pub fn ssim(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let range = value_range(target);
    let l = if range > 0.0 { range } else { 1.0 };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mx = filter_valid(pred, &k);
    let my = filter_valid(target, &k);
    let sxx = filter_valid(&(pred * pred), &k) - &mx * &mx;
    let syy = filter_valid(&(target * target), &k) - &my * &my;
    let sxy = filter_valid(&(pred * target), &k) - &mx * &my;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let (vx, vy, cxy) = (
            sxx.as_slice().unwrap()[i],
            syy.as_slice().unwrap()[i],
            sxy.as_slice().unwrap()[i],
        );
        total += (2.0 * a * b + c1) * (2.0 * cxy + c2) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// `(mean(signal) − mean(background)) / std(background)`, population std.
pub fn cnr(img: &Array2<f64>, signal: &Array2<bool>, background: &Array2<bool>) -> Result<f64> {
    if signal.dim() != img.dim() || background.dim() != img.dim() {
        return Err(Error::Shape("masks must match the image shape".into()));
    }
    if signal.iter().zip(background.iter()).any(|(&s, &b)| s && b) {
        return Err(Error::InvalidParameter(
            "signal and background masks overlap".into(),
        ));
    }
    let pick = |mask: &Array2<bool>| -> Vec<f64> {
        Zip::from(img)
            .and(mask)
            .fold(Vec::new(), |mut acc, &v, &m| {
                if m {
                    acc.push(v);
                }
                acc
            })
    };
    let s = pick(signal);
    let b = pick(background);
    if s.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter(
            "cnr masks must be non-empty".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mb = mean(&b);
    let sd = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / b.len() as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Numerical(
            "background standard deviation is zero".into(),
        ));
    }
    Ok((mean(&s) - mb) / sd)
}

/// Signal = top quartile of `truth`, background = bottom quartile.
pub fn quartile_masks(truth: &Array2<f64>) -> Result<(Array2<bool>, Array2<bool>)> {
    if truth.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let mut sorted: Vec<f64> = truth.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q1 = sorted[(n - 1) / 4];
    let q3 = sorted[(3 * (n - 1)).div_ceil(4)];
    if q1 >= q3 {
        return Err(Error::InvalidParameter(
            "ground truth has too little spread for quartile masks".into(),
        ));
    }
    Ok((truth.mapv(|v| v >= q3), truth.mapv(|v| v <= q1)))
}

/// Bilinear samples at `n` evenly spaced points from `p0` to `p1`, where a
/// point `(x, y)` addresses `img[[x, y]]`.
pub fn line_profile(
    img: &Array2<f64>,
    p0: (f64, f64),
    p1: (f64, f64),
    n: usize,
) -> Result<Array1<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter(
            "line profile needs at least 2 samples".into(),
        ));
    }
    let (h, w) = img.dim();
    for p in [p0, p1] {
        let inside = p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (h as f64 - 1.0) && p.1 <= (w as f64 - 1.0);
        if !inside {
            return Err(Error::InvalidParameter(format!(
                "endpoint {p:?} outside image {h}x{w}"
            )));
        }
    }
    Ok(Array1::from_shape_fn(n, |i| {
        let t = i as f64 / (n - 1) as f64;
        sample_bilinear(img, p0.0 + t * (p1.0 - p0.0), p0.1 + t * (p1.1 - p0.1))
    }))
}

/// Radial power spectrum and the resolution cutoff read from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCutoff {
    /// Å⁻¹.
    pub cutoff: f64,
    /// Bin centres, Å⁻¹.
    pub frequencies: Vec<f64>,
    /// Mean power per radial bin.
    pub power: Vec<f64>,
    pub noise_floor: f64,
    /// No bin rose above the threshold, so the cutoff was pinned to Nyquist.
    pub floor_dominated: bool,
}

/// Highest spatial frequency whose 3-bin smoothed radial power stays at or
/// above `factor` × the noise floor (median pixel power in the outer 10% of
/// the band below Nyquist).
pub fn spectral_cutoff(img: &Array2<f64>, pixel_size: f64, factor: f64) -> Result<SpectralCutoff> {
    let (h, w) = img.dim();
    if h < 32 || w < 32 {
        return Err(Error::Shape(format!(
            "spectral cutoff needs at least 32x32, got {h}x{w}"
        )));
    }
    if !(pixel_size > 0.0) || !(factor > 0.0) {
        return Err(Error::InvalidParameter(
            "pixel size and factor must be positive".into(),
        ));
    }
    let mean = img.mean().unwrap();
    let mut f = img.mapv(|v| Complex64::new(v - mean, 0.0));
    Fft2::new(h, w).forward(&mut f);
    let fx = fftfreq(h, pixel_size);
    let fy = fftfreq(w, pixel_size);
    let nyquist = 0.5 / pixel_size;
    let width = 1.0 / (h.max(w) as f64 * pixel_size);
    let nbins = (nyquist / width).floor() as usize + 1;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let mut band = Vec::new();
    for ((i, j), v) in f.indexed_iter() {
        let r = fx[i].hypot(fy[j]);
        if r > nyquist {
            continue;
        }
        let p = v.norm_sqr();
        let b = (r / width).round() as usize;
        if b < nbins {
            sums[b] += p;
            counts[b] += 1;
        }
        if r >= 0.9 * nyquist {
            band.push(p);
        }
    }
    let power: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let frequencies: Vec<f64> = (0..nbins).map(|b| b as f64 * width).collect();
    let peak = power.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(SpectralCutoff {
            cutoff: 0.0,
            frequencies,
            power,
            noise_floor: 0.0,
            floor_dominated: false,
        });
    }
    band.sort_by(f64::total_cmp);
    let median = band[band.len() / 2];
    let noise_floor = median.max(1e-12 * peak);
    let smoothed: Vec<f64> = (0..nbins)
        .map(|b| {
            let lo = b.saturating_sub(1);
            let hi = (b + 1).min(nbins - 1);
            power[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let last = (1..nbins)
        .rev()
        .find(|&b| smoothed[b] >= factor * noise_floor);
    let (cutoff, floor_dominated) = match last {
        Some(b) => (frequencies[b], false),
        None => (nyquist, true),
    };
    Ok(SpectralCutoff {
        cutoff,
        frequencies,
        power,
        noise_floor,
        floor_dominated,
    })
}

/// Least-squares `a · pred + b` matching `target`, returned with `(a, b)`.
pub fn affine_align(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(Array2<f64>, f64, f64)> {
    same_shape(pred, target)?;
    let mp = pred.mean().unwrap();
    let mt = target.mean().unwrap();
    let (cov, var) = Zip::from(pred)
        .and(target)
        .fold((0.0, 0.0), |(c, v), &p, &t| {
            (c + (p - mp) * (t - mt), v + (p - mp).powi(2))
        });
    let a = if var > 0.0 { cov / var } else { 0.0 };
    let b = mt - a * mp;
    Ok((pred.mapv(|p| a * p + b), a, b))
}

/// Scores of one reconstruction against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub cnr: f64,
    /// Å⁻¹.
    pub cutoff: f64,
}

/// Aligns `pred` to `truth` by a least-squares affine intensity map, then
/// scores it. Phase reconstructions carry arbitrary offset, scale and sign.
pub fn score(pred: &Array2<f64>, truth: &Array2<f64>, pixel_size: f64) -> Result<Scores> {
    let (aligned, _, _) = affine_align(pred, truth)?;
    let (signal, background) = quartile_masks(truth)?;
    Ok(Scores {
        psnr: psnr(&aligned, truth)?,
        ssim: ssim(&aligned, truth)?,
        cnr: cnr(&aligned, &signal, &background)?,
        cutoff: spectral_cutoff(pred, pixel_size, 3.0)?.cutoff,
    })
}
