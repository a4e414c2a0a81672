//! Parametric phantoms and a single-slice weak-phase 4D-STEM forward model.

use ndarray::{s, Array2, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datacube::{DataCube4D, Layout, ScanCalibration};
use crate::error::{Error, Result};
use crate::fft::{fftfreq, Fft2};

const PLANCK: f64 = 6.626_070_15e-34;
const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default real-space padding around the scanned field, in Å.
pub const DEFAULT_MARGIN: f64 = 40.0;

/// Relativistic electron wavelength in Å for a beam energy in keV.
pub fn electron_wavelength(energy_kev: f64) -> f64 {
    let ev = energy_kev * 1e3 * ELEMENTARY_CHARGE;
    let mc2 = ELECTRON_MASS * SPEED_OF_LIGHT * SPEED_OF_LIGHT;
    let p = (2.0 * ELECTRON_MASS * ev * (1.0 + ev / (2.0 * mc2))).sqrt();
    PLANCK / p * 1e10
}

/// Probe-forming optics on a square sampling window.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    pub wavelength: f64,
    /// Aperture radius α/λ in Å⁻¹.
    pub aperture_cutoff: f64,
    pub defocus: f64,
    /// Window side length in pixels.
    pub n: usize,
    /// Å per window pixel.
    pub sampling: f64,
}

impl ProbeSpec {
    pub fn new(
        energy_kev: f64,
        convergence_mrad: f64,
        defocus: f64,
        n: usize,
        sampling: f64,
    ) -> Self {
        let wavelength = electron_wavelength(energy_kev);
        Self {
            wavelength,
            aperture_cutoff: convergence_mrad * 1e-3 / wavelength,
            defocus,
            n,
            sampling,
        }
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.sampling
    }

    fn check(&self) -> Result<()> {
        if self.aperture_cutoff > self.nyquist() {
            return Err(Error::UndersampledProbe {
                cutoff: self.aperture_cutoff,
                nyquist: self.nyquist(),
            });
        }
        if self.n == 0 || !(self.sampling > 0.0) {
            return Err(Error::InvalidParameter(
                "probe window must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Reciprocal-space aperture `A(k)` in FFT order, with the defocus phase applied.
pub fn probe_aperture(spec: &ProbeSpec) -> Result<Array2<Complex64>> {
    tilted_aperture(spec, (0.0, 0.0))
}

/// Aperture centred on frequency `tilt` (in FFT pixels) instead of zero.
fn tilted_aperture(spec: &ProbeSpec, tilt: (f64, f64)) -> Result<Array2<Complex64>> {
    spec.check()?;
    let k = fftfreq(spec.n, spec.sampling);
    let dk = 1.0 / (spec.n as f64 * spec.sampling);
    let kmax2 = spec.aperture_cutoff * spec.aperture_cutoff;
    let chi = std::f64::consts::PI * spec.wavelength * spec.defocus;
    Ok(Array2::from_shape_fn((spec.n, spec.n), |(i, j)| {
        let kx = k[i] - tilt.0 * dk;
        let ky = k[j] - tilt.1 * dk;
        let k2 = kx * kx + ky * ky;
        if k2 <= kmax2 {
            Complex64::from_polar(1.0, -chi * k2)
        } else {
            Complex64::new(0.0, 0.0)
        }
    }))
}

/// Real-space probe centred on pixel `(n/2, n/2)` with `Σ|ψ|² = 1`.
pub fn build_probe(spec: &ProbeSpec) -> Result<Array2<Complex64>> {
    let mut a = probe_aperture(spec)?;
    let k = fftfreq(spec.n, spec.sampling);
    let c = (spec.n / 2) as f64 * spec.sampling;
    let ramp: Vec<Complex64> = k
        .iter()
        .map(|&kv| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * kv * c))
        .collect();
    for ((i, j), v) in a.indexed_iter_mut() {
        *v *= ramp[i] * ramp[j];
    }
    let mut fft = Fft2::new(spec.n, spec.n);
    fft.inverse(&mut a);
    let norm: f64 = a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParameter(
            "aperture passes no frequencies".into(),
        ));
    }
    a.mapv_inplace(|v| v / norm);
    Ok(a)
}

/// A regular sampling grid in specimen coordinates (Å), scan position (0, 0) at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGrid {
    /// Coordinate of pixel `[0, 0]`.
    pub origin: (f64, f64),
    pub pixel_size: f64,
    pub shape: (usize, usize),
}

impl ObjectGrid {
    /// Ground-truth grid for an `(H, W)` scan upsampled `r` times: pixel `a`
    /// sits at scan coordinate `(a + 0.5)/r - 0.5`.
    pub fn ground_truth(step: f64, scan_shape: (usize, usize), r: usize) -> Self {
        let o = (0.5 / r as f64 - 0.5) * step;
        Self {
            origin: (o, o),
            pixel_size: step / r as f64,
            shape: (scan_shape.0 * r, scan_shape.1 * r),
        }
    }

    /// Field of view covered by the pixels, as `(min, max)` per axis including half-pixel borders.
    pub fn extent(&self) -> ((f64, f64), (f64, f64)) {
        let h = 0.5 * self.pixel_size;
        (
            (
                self.origin.0 - h,
                self.origin.0 + self.shape.0 as f64 * self.pixel_size - h,
            ),
            (
                self.origin.1 - h,
                self.origin.1 + self.shape.1 as f64 * self.pixel_size - h,
            ),
        )
    }

    fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + i as f64 * self.pixel_size,
            self.origin.1 + j as f64 * self.pixel_size,
        )
    }
}

fn default_basis() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}

fn default_true() -> bool {
    true
}

fn default_retries() -> usize {
    100_000
}

fn default_edge() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalParams {
    /// Lattice vectors in Å.
    pub lattice: [[f64; 2]; 2],
    /// Basis positions in fractional lattice coordinates.
    #[serde(default = "default_basis")]
    pub basis: Vec<[f64; 2]>,
    /// Peak phase per atom column in rad.
    pub amplitude: f64,
    /// Gaussian width of an atom column in Å.
    pub sigma: f64,
    /// Draw a random lattice origin from the seed.
    #[serde(default = "default_true")]
    pub random_offset: bool,
}

impl CrystalParams {
    pub fn square(a: f64, amplitude: f64, sigma: f64) -> Self {
        Self {
            lattice: [[a, 0.0], [0.0, a]],
            basis: default_basis(),
            amplitude,
            sigma,
            random_offset: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmorphousParams {
    pub n_atoms: usize,
    pub min_spacing: f64,
    pub amplitude: f64,
    pub sigma: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub r_inner: f64,
    pub r_outer: f64,
    #[serde(default = "default_edge")]
    pub edge: f64,
    pub amplitude: f64,
    /// Shell centre in Å; defaults to the middle of the field of view.
    #[serde(default)]
    pub center: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidParams {
    pub period: f64,
    pub amplitude: f64,
    /// Direction of the wave vector, degrees from the x axis.
    #[serde(default)]
    pub angle_deg: f64,
}

/// Kind-specific phantom parameters, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum PhantomKind {
    Crystal(CrystalParams),
    Amorphous(AmorphousParams),
    Blob(BlobParams),
    Sinusoid(SinusoidParams),
}

/// JSON recipe `{"kind": ..., "seed": ..., "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecipe {
    #[serde(flatten)]
    pub kind: PhantomKind,
    pub seed: u64,
    #[serde(default)]
    pub margin: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Features {
    Atoms(Vec<Atom>),
    Shell {
        center: (f64, f64),
        r_inner: f64,
        r_outer: f64,
        edge: f64,
        amplitude: f64,
    },
    Wave {
        k: (f64, f64),
        amplitude: f64,
    },
}

/// Projected specimen phase, stored analytically and rendered on its ground-truth grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub recipe: PhantomRecipe,
    pub grid: ObjectGrid,
    pub margin: f64,
    /// Phase in rad on `grid`.
    pub phase: Array2<f64>,
    features: Features,
}

impl Phantom {
    /// Atom list for crystal and amorphous phantoms.
    pub fn atoms(&self) -> Option<&[Atom]> {
        match &self.features {
            Features::Atoms(a) => Some(a),
            _ => None,
        }
    }

    pub fn pixel_size(&self) -> f64 {
        self.grid.pixel_size
    }

    /// Evaluates the phase on an arbitrary grid.
    pub fn render(&self, grid: &ObjectGrid) -> Array2<f64> {
        match &self.features {
            Features::Atoms(atoms) => render_atoms(atoms, grid),
            Features::Shell {
                center,
                r_inner,
                r_outer,
                edge,
                amplitude,
            } => Array2::from_shape_fn(grid.shape, |(i, j)| {
                let (x, y) = grid.coord(i, j);
                let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                let rise = 0.5 * (1.0 + ((r - r_inner) / edge).tanh());
                let fall = 0.5 * (1.0 - ((r - r_outer) / edge).tanh());
                amplitude * rise * fall
            }),
            Features::Wave { k, amplitude } => Array2::from_shape_fn(grid.shape, |(i, j)| {
                let (x, y) = grid.coord(i, j);
                amplitude * (2.0 * std::f64::consts::PI * (k.0 * x + k.1 * y)).sin()
            }),
        }
    }
}

fn render_atoms(atoms: &[Atom], grid: &ObjectGrid) -> Array2<f64> {
    let mut out = Array2::zeros(grid.shape);
    let (h, w) = grid.shape;
    let px = grid.pixel_size;
    for a in atoms {
        let reach = 5.0 * a.sigma;
        let lo = |c: f64, o: f64| (((c - reach - o) / px).floor().max(0.0)) as usize;
        let hi = |c: f64, o: f64, n: usize| {
            ((((c + reach - o) / px).ceil()).max(-1.0) as isize + 1).clamp(0, n as isize) as usize
        };
        let (i0, i1) = (lo(a.x, grid.origin.0), hi(a.x, grid.origin.0, h));
        let (j0, j1) = (lo(a.y, grid.origin.1), hi(a.y, grid.origin.1, w));
        let inv = 1.0 / (2.0 * a.sigma * a.sigma);
        for i in i0..i1.max(i0) {
            let dx = grid.origin.0 + i as f64 * px - a.x;
            for j in j0..j1.max(j0) {
                let dy = grid.origin.1 + j as f64 * px - a.y;
                out[[i, j]] += a.amplitude * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    out
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{what} must be > 0, got {v}"
        )))
    }
}

/// Builds a phantom covering `grid` plus a margin, deterministic in `recipe.seed`.
pub fn make_phantom(recipe: &PhantomRecipe, grid: &ObjectGrid) -> Result<Phantom> {
    let margin = recipe.margin.unwrap_or(DEFAULT_MARGIN);
    if !(margin >= 0.0) {
        return Err(Error::InvalidParameter("margin must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let ((x0, x1), (y0, y1)) = grid.extent();
    let (x0, x1, y0, y1) = (x0 - margin, x1 + margin, y0 - margin, y1 + margin);
    let features = match &recipe.kind {
        PhantomKind::Crystal(p) => {
            positive(p.sigma, "sigma")?;
            let [a1, a2] = p.lattice;
            let det = a1[0] * a2[1] - a1[1] * a2[0];
            if det.abs() < 1e-9 {
                return Err(Error::InvalidParameter(
                    "lattice vectors are collinear".into(),
                ));
            }
            let offset = if p.random_offset {
                let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                (u * a1[0] + v * a2[0], u * a1[1] + v * a2[1])
            } else {
                (0.0, 0.0)
            };
            // fractional coordinates of the padded region's corners bound the index range
            let to_frac =
                |x: f64, y: f64| ((x * a2[1] - y * a2[0]) / det, (a1[0] * y - a1[1] * x) / det);
            let corners = [
                to_frac(x0, y0),
                to_frac(x0, y1),
                to_frac(x1, y0),
                to_frac(x1, y1),
            ];
            let n1 = corners
                .iter()
                .map(|c| c.0)
                .fold(f64::INFINITY, f64::min)
                .floor() as i64
                - 2;
            let m1 = corners
                .iter()
                .map(|c| c.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil() as i64
                + 2;
            let n2 = corners
                .iter()
                .map(|c| c.1)
                .fold(f64::INFINITY, f64::min)
                .floor() as i64
                - 2;
            let m2 = corners
                .iter()
                .map(|c| c.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil() as i64
                + 2;
            let mut atoms = Vec::new();
            for i in n1..=m1 {
                for j in n2..=m2 {
                    for b in &p.basis {
                        let (u, v) = (i as f64 + b[0], j as f64 + b[1]);
                        let x = u * a1[0] + v * a2[0] + offset.0;
                        let y = u * a1[1] + v * a2[1] + offset.1;
                        if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                            atoms.push(Atom {
                                x,
                                y,
                                amplitude: p.amplitude,
                                sigma: p.sigma,
                            });
                        }
                    }
                }
            }
            Features::Atoms(atoms)
        }
        PhantomKind::Amorphous(p) => {
            positive(p.sigma, "sigma")?;
            let min2 = p.min_spacing * p.min_spacing;
            let mut atoms: Vec<Atom> = Vec::with_capacity(p.n_atoms);
            let mut tries = 0usize;
            while atoms.len() < p.n_atoms {
                if tries >= p.max_retries {
                    return Err(Error::PackingFailed {
                        placed: atoms.len(),
                        requested: p.n_atoms,
                        spacing: p.min_spacing,
                    });
                }
                tries += 1;
                let x = rng.gen_range(x0..x1);
                let y = rng.gen_range(y0..y1);
                if atoms
                    .iter()
                    .all(|a| (a.x - x).powi(2) + (a.y - y).powi(2) >= min2)
                {
                    atoms.push(Atom {
                        x,
                        y,
                        amplitude: p.amplitude,
                        sigma: p.sigma,
                    });
                }
            }
            Features::Atoms(atoms)
        }
        PhantomKind::Blob(p) => {
            positive(p.edge, "edge")?;
            if !(p.r_outer > p.r_inner && p.r_inner >= 0.0) {
                return Err(Error::InvalidParameter(
                    "blob needs 0 <= r_inner < r_outer".into(),
                ));
            }
            let c = p
                .center
                .map(|c| (c[0], c[1]))
                .unwrap_or(((x0 + x1) / 2.0, (y0 + y1) / 2.0));
            Features::Shell {
                center: c,
                r_inner: p.r_inner,
                r_outer: p.r_outer,
                edge: p.edge,
                amplitude: p.amplitude,
            }
        }
        PhantomKind::Sinusoid(p) => {
            positive(p.period, "period")?;
            let t = p.angle_deg.to_radians();
            Features::Wave {
                k: (t.cos() / p.period, t.sin() / p.period),
                amplitude: p.amplitude,
            }
        }
    };
    let mut phantom = Phantom {
        recipe: recipe.clone(),
        grid: grid.clone(),
        margin,
        phase: Array2::zeros((0, 0)),
        features,
    };
    phantom.phase = phantom.render(grid);
    let peak = phantom.phase.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !phantom.phase.iter().all(|v| v.is_finite()) || peak > 1.0 + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "phantom phase peaks at {peak:.3} rad; weak-phase model needs <= 1 rad"
        )));
    }
    Ok(phantom)
}

/// Supersampled phantom phase at `(rH, rW)` over the scan field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub phase: Array2<f64>,
    pub pixel_size: f64,
    pub upscale: usize,
}

/// Internal sampling used by [`simulate_scan`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationGrid {
    /// Å per simulation pixel.
    pub dx: f64,
    /// Simulation pixels per detector pixel along each axis.
    pub bin: usize,
    /// Probe window side (`bin · K`).
    pub n: usize,
}

impl SimulationGrid {
    /// Picks the smallest window that holds the defocused probe with 20 Å to spare.
    pub fn for_calibration(calib: &ScanCalibration) -> Result<Self> {
        let (kx, ky) = calib.detector_shape;
        if kx != ky {
            return Err(Error::Geometry(format!(
                "simulation needs a square detector, got {kx}x{ky}"
            )));
        }
        let lambda = electron_wavelength(calib.energy);
        let dx = lambda / (kx as f64 * calib.detector_pixel * 1e-3);
        let need = 2.0 * calib.defocus.abs() * calib.convergence * 1e-3 + 20.0;
        let bin = ((need / (kx as f64 * dx)).ceil() as usize).max(1);
        Ok(Self {
            dx,
            bin,
            n: bin * kx,
        })
    }
}

/// Scans a probe over the phantom and records unit-flux diffraction patterns.
pub fn simulate_scan(
    phantom: &Phantom,
    calib: &ScanCalibration,
    scan_shape: (usize, usize),
) -> Result<(DataCube4D, GroundTruth)> {
    calib.validate()?;
    let (h, w) = scan_shape;
    if h == 0 || w == 0 {
        return Err(Error::Geometry("scan shape must be non-empty".into()));
    }
    let r_f = calib.step_size / phantom.pixel_size();
    let r = r_f.round() as usize;
    if r == 0 || (r_f - r as f64).abs() > 1e-9 {
        return Err(Error::Geometry(format!(
            "phantom pixel {} A is not an integer fraction of step {} A",
            phantom.pixel_size(),
            calib.step_size
        )));
    }
    let expected = ObjectGrid::ground_truth(calib.step_size, scan_shape, r);
    if phantom.grid.shape != expected.shape
        || (phantom.grid.origin.0 - expected.origin.0).abs() > 1e-9
        || (phantom.grid.origin.1 - expected.origin.1).abs() > 1e-9
    {
        return Err(Error::Geometry(format!(
            "phantom grid {:?} does not cover scan {:?} at x{r} (expected {:?})",
            phantom.grid.shape, scan_shape, expected.shape
        )));
    }

    let sim = SimulationGrid::for_calibration(calib)?;
    let (n, dx, b) = (sim.n, sim.dx, sim.bin);

    // whole transmission function, rendered once
    let pad = n / 2 + 2;
    let origin = -(pad as f64) * dx;
    let gx = ((h - 1) as f64 * calib.step_size / dx).ceil() as usize + n + 6;
    let gy = ((w - 1) as f64 * calib.step_size / dx).ceil() as usize + n + 6;
    let object = ObjectGrid {
        origin: (origin, origin),
        pixel_size: dx,
        shape: (gx, gy),
    };
    let transmission = phantom
        .render(&object)
        .mapv(|p| Complex64::from_polar(1.0, p));

    // detector placement: zero frequency lands on calib.center
    let (kx, ky) = calib.detector_shape;
    let place = |c: f64| {
        let z = b as f64 * (c + 0.5) - 0.5;
        let zi = z.floor();
        (zi as usize, z - zi)
    };
    let (zx, fx) = place(calib.center.0);
    let (zy, fy) = place(calib.center.1);
    // the sub-pixel part of the placement tilts the beam, so the unscattered
    // disk stays exactly on the DFT grid
    let spec = ProbeSpec::new(calib.energy, calib.convergence, calib.defocus, n, dx);
    let aperture = tilted_aperture(&spec, (fx, fy))?;
    let k = fftfreq(n, dx);
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut fft = Fft2::new(n, n);
    let mut values = Array4::<f64>::zeros((h, w, kx, ky));
    let mut field = Array2::<Complex64>::zeros((n, n));
    let mut ramp_x = vec![Complex64::default(); n];
    let mut ramp_y = vec![Complex64::default(); n];
    let mut binned = Array2::<f64>::zeros((kx, ky));
    for ix in 0..h {
        let px = (ix as f64 * calib.step_size - origin) / dx;
        let i0 = px.floor();
        let cx = (n / 2) as f64 + (px - i0);
        let sx = i0 as usize - n / 2;
        for (rv, &kv) in ramp_x.iter_mut().zip(&k) {
            *rv = Complex64::from_polar(1.0, -two_pi * kv * cx * dx);
        }
        for iy in 0..w {
            let py = (iy as f64 * calib.step_size - origin) / dx;
            let j0 = py.floor();
            let cy = (n / 2) as f64 + (py - j0);
            let sy = j0 as usize - n / 2;
            for (rv, &kv) in ramp_y.iter_mut().zip(&k) {
                *rv = Complex64::from_polar(1.0, -two_pi * kv * cy * dx);
            }
            for ((i, j), v) in field.indexed_iter_mut() {
                *v = aperture[[i, j]] * ramp_x[i] * ramp_y[j];
            }
            fft.inverse(&mut field);
            let window = transmission.slice(s![sx..sx + n, sy..sy + n]);
            for ((i, j), v) in field.indexed_iter_mut() {
                *v *= window[[i, j]];
            }
            fft.forward(&mut field);
            binned.fill(0.0);
            for ((i, j), v) in field.indexed_iter() {
                let qi = (i + zx) % n / b;
                let qj = (j + zy) % n / b;
                binned[[qi, qj]] += v.norm_sqr();
            }
            let total = binned.sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "pattern at ({ix}, {iy}) has total intensity {total}"
                )));
            }
            values
                .slice_mut(s![ix, iy, .., ..])
                .assign(&(&binned / total));
        }
    }
    let cube = DataCube4D::new(values, calib.clone(), Layout::RealMajor, false)?;
    let gt = GroundTruth {
        phase: phantom.phase.clone(),
        pixel_size: phantom.pixel_size(),
        upscale: r,
    };
    Ok((cube, gt))
}
