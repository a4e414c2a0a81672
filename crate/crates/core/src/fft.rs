//! Row-major 2-D FFT helpers over `ndarray` complex arrays.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward and inverse transforms for one `(nx, ny)` shape.
pub struct Fft2 {
    nx: usize,
    ny: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    column: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            fwd_x: planner.plan_fft_forward(nx),
            fwd_y: planner.plan_fft_forward(ny),
            inv_x: planner.plan_fft_inverse(nx),
            inv_y: planner.plan_fft_inverse(ny),
            column: vec![Complex64::default(); nx],
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&mut self, a: &mut Array2<Complex64>) {
        let (fx, fy) = (self.fwd_x.clone(), self.fwd_y.clone());
        self.run(a, &*fx, &*fy);
    }

    /// Inverse transform in place, scaled by `1/(nx·ny)`.
    pub fn inverse(&mut self, a: &mut Array2<Complex64>) {
        let (ix, iy) = (self.inv_x.clone(), self.inv_y.clone());
        self.run(a, &*ix, &*iy);
        let s = 1.0 / (self.nx * self.ny) as f64;
        a.mapv_inplace(|v| v * s);
    }

    fn run(&mut self, a: &mut Array2<Complex64>, fx: &dyn Fft<f64>, fy: &dyn Fft<f64>) {
        assert_eq!(a.dim(), (self.nx, self.ny), "fft shape mismatch");
        if !a.is_standard_layout() {
            *a = a.as_standard_layout().into_owned();
        }
        let data = a.as_slice_mut().unwrap();
        fy.process(data);
        for j in 0..self.ny {
            for i in 0..self.nx {
                self.column[i] = data[i * self.ny + j];
            }
            fx.process(&mut self.column);
            for i in 0..self.nx {
                data[i * self.ny + j] = self.column[i];
            }
        }
    }
}

/// Sample frequencies in cycles per unit for `n` points at spacing `d`, FFT order.
pub fn fftfreq(n: usize, d: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let k = if i < n.div_ceil(2) {
                i as isize
            } else {
                i as isize - n as isize
            };
            k as f64 / (n as f64 * d)
        })
        .collect()
}
