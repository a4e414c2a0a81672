//! Bicubic and bilinear image sampling with clamped borders.

use ndarray::Array2;

fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Keys cubic convolution (a = -0.5) at fractional pixel `(x, y)`; edges clamp.
pub fn sample_bicubic(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut acc = 0.0;
    for di in -1..=2isize {
        let wx = keys(fx - di as f64);
        if wx == 0.0 {
            continue;
        }
        let i = clamp(x0 as isize + di, h);
        for dj in -1..=2isize {
            let wy = keys(fy - dj as f64);
            if wy == 0.0 {
                continue;
            }
            acc += wx * wy * img[[i, clamp(y0 as isize + dj, w)]];
        }
    }
    acc
}

/// Bilinear sample at `(x, y)`; callers keep the point inside the image.
pub fn sample_bilinear(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x0 = (x.floor() as usize).min(h - 1);
    let y0 = (y.floor() as usize).min(w - 1);
    let x1 = (x0 + 1).min(h - 1);
    let y1 = (y0 + 1).min(w - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[[x0, y0]] * (1.0 - fy) + img[[x0, y1]] * fy;
    let bottom = img[[x1, y0]] * (1.0 - fy) + img[[x1, y1]] * fy;
    top * (1.0 - fx) + bottom * fx
}

/// Scan coordinate of upsampled pixel `a` (pixel-centre alignment).
pub fn upsampled_coord(a: usize, r: usize) -> f64 {
    (a as f64 + 0.5) / r as f64 - 0.5
}

/// Bicubic `r`-fold upsampling on the pixel-centre-aligned grid.
pub fn upsample_bicubic(img: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h * r, w * r), |(a, b)| {
        sample_bicubic(img, upsampled_coord(a, r), upsampled_coord(b, r))
    })
}
