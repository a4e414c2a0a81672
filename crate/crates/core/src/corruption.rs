//! Shot noise, read noise and bias at a chosen electron dose.

use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::datacube::{DataCube4D, Layout};
use crate::error::{Error, Result};

/// Nominal dose (e⁻/Å²) standing in for an infinite dose when converting to counts.
pub const NOMINAL_INFINITE_DOSE: f64 = 1e6;

/// Electron dose in e⁻/Å²; JSON accepts a number or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Dose(pub f64);

impl Dose {
    pub const INFINITE: Dose = Dose(f64::INFINITY);

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Dose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Dose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity" | "∞") {
            return Ok(Dose::INFINITE);
        }
        t.parse::<f64>()
            .map(Dose)
            .map_err(|_| Error::Config(format!("cannot parse dose {s:?}")))
    }
}

impl Serialize for Dose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Dose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Dose(v)),
            Raw::Text(t) => t.parse().map_err(de::Error::custom),
        }
    }
}

/// One corruption draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseSpec {
    pub dose: Dose,
    pub gaussian_sigma: f64,
    pub bias: f64,
    pub seed: u64,
}

impl DoseSpec {
    pub fn new(dose: f64, seed: u64) -> Self {
        Self {
            dose: Dose(dose),
            gaussian_sigma: 0.0,
            bias: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose.0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dose must be > 0, got {}",
                self.dose
            )));
        }
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::InvalidParameter(
                "gaussian_sigma must be >= 0".into(),
            ));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidParameter("bias must be finite".into()));
        }
        Ok(())
    }

    /// Expected electrons per diffraction pattern, `dose · step²`.
    pub fn electrons_per_pattern(&self, step: f64) -> f64 {
        let d = if self.dose.is_infinite() {
            NOMINAL_INFINITE_DOSE
        } else {
            self.dose.0
        };
        d * step * step
    }

    fn additive(&self) -> bool {
        self.gaussian_sigma > 0.0 || self.bias != 0.0
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    // rand_distr returns -1 once exp(-mean) rounds to 1
    if mean <= 0.0 || (-mean).exp() == 1.0 {
        0.0
    } else {
        Poisson::new(mean)
            .expect("finite positive mean")
            .sample(rng)
    }
}

/// Replaces each unit-flux pattern `p` with Poisson counts of mean `n_e·p`,
/// then adds `Normal(bias, σ²)` per pixel. Infinite dose skips the Poisson draw.
pub fn apply_dose(cube: &DataCube4D, spec: &DoseSpec) -> Result<DataCube4D> {
    spec.validate()?;
    if cube.layout() != Layout::RealMajor {
        return Err(Error::InvalidParameter(
            "apply_dose needs a real-major cube".into(),
        ));
    }
    let (h, w) = cube.scan_shape();
    let values = cube.values();
    for rx in 0..h {
        for ry in 0..w {
            let total: f64 = values.slice(ndarray::s![rx, ry, .., ..]).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::NotUnitFlux { rx, ry, total });
            }
        }
    }
    let n_e = spec.electrons_per_pattern(cube.calib().step_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = if spec.dose.is_infinite() {
        values.mapv(|v| n_e * v)
    } else {
        values.mapv(|v| poisson(&mut rng, n_e * v))
    };
    let signed = spec.gaussian_sigma > 0.0 || spec.bias < 0.0;
    if spec.additive() {
        add_gaussian(out.iter_mut(), spec.bias, spec.gaussian_sigma, &mut rng);
    }
    Ok(DataCube4D::from_parts_unchecked(
        out,
        cube.calib().clone(),
        Layout::RealMajor,
        signed,
    ))
}

fn add_gaussian<'a>(
    vals: impl Iterator<Item = &'a mut f64>,
    mean: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) {
    if sigma > 0.0 {
        let normal = Normal::new(mean, sigma).expect("finite sigma");
        for v in vals {
            *v += normal.sample(rng);
        }
    } else {
        for v in vals {
            *v += mean;
        }
    }
}

/// Corrupts raw (unnormalized) views extracted from a clean unit-flux cube.
///
/// Each view pixel sums `pixels_per_view` detector pixels, so its counts are
/// Poisson with mean `n_e·v` and its read noise is `Normal(m·bias, m·σ²)`:
/// the same distribution as corrupting the cube first and extracting after.
pub fn corrupt_views(
    views: &Array3<f64>,
    pixels_per_view: usize,
    step: f64,
    spec: &DoseSpec,
) -> Result<Array3<f64>> {
    spec.validate()?;
    let n_e = spec.electrons_per_pattern(step);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = if spec.dose.is_infinite() {
        views.mapv(|v| n_e * v)
    } else {
        views.mapv(|v| poisson(&mut rng, n_e * v))
    };
    if spec.additive() {
        let m = pixels_per_view as f64;
        add_gaussian(
            out.iter_mut(),
            m * spec.bias,
            m.sqrt() * spec.gaussian_sigma,
            &mut rng,
        );
    }
    Ok(out)
}

fn zero() -> f64 {
    0.0
}

/// Ranges for the per-epoch corruption sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub dose_min: Dose,
    pub dose_max: Dose,
    #[serde(default = "zero")]
    pub sigma_min: f64,
    #[serde(default = "zero")]
    pub sigma_max: f64,
    #[serde(default = "zero")]
    pub bias_min: f64,
    #[serde(default = "zero")]
    pub bias_max: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            dose_min: Dose(100.0),
            dose_max: Dose(1000.0),
            sigma_min: 0.0,
            sigma_max: 0.5,
            bias_min: 0.0,
            bias_max: 0.0,
            seed: 1234,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.dose_min.0, self.dose_max.0);
        if !(lo > 0.0) || lo > hi {
            return Err(Error::Config(format!(
                "dose range [{}, {}] must satisfy 0 < dose_min <= dose_max",
                self.dose_min, self.dose_max
            )));
        }
        if self.dose_min.is_infinite() != self.dose_max.is_infinite() {
            return Err(Error::Config(
                "an infinite dose range must be degenerate".into(),
            ));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::Config(
                "sigma range must satisfy 0 <= sigma_min <= sigma_max".into(),
            ));
        }
        if !(self.bias_min <= self.bias_max) {
            return Err(Error::Config(
                "bias range must satisfy bias_min <= bias_max".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one `(epoch, sample)` draw, independent of iteration order.
pub fn derive_seed(master: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ epoch) ^ index.rotate_left(32))
}

/// Draws the corruption for sample `index` in `epoch`: log-uniform dose,
/// uniform sigma and bias.
pub fn sample_corruption(epoch: u64, index: u64, cfg: &CorruptionConfig) -> Result<DoseSpec> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, epoch, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (cfg.dose_min.0, cfg.dose_max.0);
    let dose = if lo == hi {
        lo
    } else {
        rng.gen_range(lo.ln()..hi.ln()).exp()
    };
    let mut uniform = |a: f64, b: f64| if a == b { a } else { rng.gen_range(a..b) };
    let gaussian_sigma = uniform(cfg.sigma_min, cfg.sigma_max);
    let bias = uniform(cfg.bias_min, cfg.bias_max);
    Ok(DoseSpec {
        dose: Dose(dose),
        gaussian_sigma,
        bias,
        seed: splitmix64(seed),
    })
}
