//! Training objective: mean absolute error, MS-SSIM and an optional
//! feature-space term, switched on the scan step size.

use std::path::Path;

use misr4d_tensor::{Graph, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::gaussian_kernel;

pub const DEFAULT_MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Floor applied to each MS-SSIM factor before exponentiation.
const MSSSIM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Å. Steps strictly below this include the perceptual term.
    pub step_threshold: f64,
    pub msssim_weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.006,
            step_threshold: 1.0,
            msssim_weights: DEFAULT_MSSSIM_WEIGHTS.to_vec(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.step_threshold > 0.0) {
            return Err(Error::Config("step_threshold must be positive".into()));
        }
        if self.msssim_weights.is_empty() || self.msssim_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(
                "ms-ssim weights must be non-negative and non-empty".into(),
            ));
        }
        let s: f64 = self.msssim_weights.iter().sum();
        if (s - 1.0).abs() > 1e-3 {
            return Err(Error::Config(format!(
                "ms-ssim weights sum to {s}, expected 1"
            )));
        }
        if self.window % 2 == 0 || !(self.sigma > 0.0) {
            return Err(Error::Config(
                "window must be odd and sigma positive".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_perceptual(&self, step_size: f64) -> bool {
        step_size < self.step_threshold
    }

    /// Scales an `h × w` image supports, capped at the configured count.
    pub fn feasible_scales(&self, h: usize, w: usize) -> usize {
        if h < self.window || w < self.window {
            return 0;
        }
        let (mut h, mut w, mut scales) = (h, w, 1);
        while scales < self.msssim_weights.len()
            && h % 2 == 0
            && w % 2 == 0
            && h / 2 >= self.window
            && w / 2 >= self.window
        {
            h /= 2;
            w /= 2;
            scales += 1;
        }
        scales
    }
}

/// Maps a 3-channel image batch `(N, 3, H, W)` to a feature stack.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// Features are the input itself; the perceptual term becomes the MSE.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _g: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `(cout, cin, k, k)`.
    pub shape: [usize; 4],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

/// A fixed stack of convolutions loaded from JSON, for plugging in pretrained
/// feature extractors. Where to truncate the source network is the weight
/// provider's choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn load(path: &Path) -> Result<Self> {
        let s: ConvStack = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cin = 3;
        for (i, l) in self.layers.iter().enumerate() {
            let [co, ci, k, k2] = l.shape;
            if ci != cin
                || k != k2
                || k % 2 == 0
                || l.weight.len() != co * ci * k * k
                || l.bias.len() != co
            {
                return Err(Error::Config(format!("feature layer {i} is malformed")));
            }
            cin = co;
        }
        Ok(())
    }
}

impl FeatureExtractor for ConvStack {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = x;
        for l in &self.layers {
            let w = g.constant(Tensor::from_vec(l.shape, l.weight.clone()));
            let b = g.constant(Tensor::from_vec([l.shape[0], 1, 1, 1], l.bias.clone()));
            y = g.conv2d(y, w, Some(b))?;
            if l.relu {
                y = g.relu(y);
            }
        }
        Ok(y)
    }
}

fn check_pair(g: &Graph, pred: Var, target: Var) -> Result<()> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            g.shape(pred),
            g.shape(target)
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn pixel_term(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_pair(g, pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Dynamic range of a target image: max − min, or 1 when constant.
pub fn dynamic_range(t: &Tensor) -> f64 {
    let r = t.max() - t.min();
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// MS-SSIM index over `weights.len()` scales, with constants from `range`.
pub fn ms_ssim_term(
    g: &mut Graph,
    pred: Var,
    target: Var,
    range: f64,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    check_pair(g, pred, target)?;
    let [_, _, h, w] = g.shape(pred);
    let feasible = cfg.feasible_scales(h, w);
    if weights.len() > feasible || weights.is_empty() {
        return Err(Error::Shape(format!(
            "{h}x{w} image supports at most {feasible} ms-ssim scales, {} requested",
            weights.len()
        )));
    }
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let (mut x, mut y) = (pred, target);
    let mut acc: Option<Var> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let mx = g.gaussian_valid(x, &kernel)?;
        let my = g.gaussian_valid(y, &kernel)?;
        let xx = g.mul(x, x)?;
        let yy = g.mul(y, y)?;
        let xy = g.mul(x, y)?;
        let exx = g.gaussian_valid(xx, &kernel)?;
        let eyy = g.gaussian_valid(yy, &kernel)?;
        let exy = g.gaussian_valid(xy, &kernel)?;
        let mx2 = g.mul(mx, mx)?;
        let my2 = g.mul(my, my)?;
        let mxy = g.mul(mx, my)?;
        let vx = g.sub(exx, mx2)?;
        let vy = g.sub(eyy, my2)?;
        let cov = g.sub(exy, mxy)?;
        // contrast-structure map (2σxy + C2) / (σx² + σy² + C2)
        let num = g.scale(cov, 2.0);
        let num = g.add_scalar(num, c2);
        let den = g.add(vx, vy)?;
        let den = g.add_scalar(den, c2);
        let mut map = g.div(num, den)?;
        if j + 1 == weights.len() {
            let ln = g.scale(mxy, 2.0);
            let ln = g.add_scalar(ln, c1);
            let ld = g.add(mx2, my2)?;
            let ld = g.add_scalar(ld, c1);
            let lum = g.div(ln, ld)?;
            map = g.mul(lum, map)?;
        } else {
            x = g.avg_pool2(x)?;
            y = g.avg_pool2(y)?;
        }
        let m = g.mean(map);
        let m = g.clamp_min(m, MSSSIM_FLOOR);
        let f = g.powf(m, wj);
        acc = Some(match acc {
            None => f,
            Some(a) => g.mul(a, f)?,
        });
    }
    Ok(acc.expect("at least one scale"))
}

/// `1 − MS-SSIM` with the weights truncated to the feasible scale count and
/// renormalized.
fn ms_ssim_loss_term(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let [_, _, h, w] = g.shape(pred);
    let n = cfg.feasible_scales(h, w);
    if n == 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {0}x{0} ssim window",
            cfg.window
        )));
    }
    let total: f64 = cfg.msssim_weights[..n].iter().sum();
    let weights: Vec<f64> = cfg.msssim_weights[..n].iter().map(|w| w / total).collect();
    let range = dynamic_range(g.value(target));
    let idx = ms_ssim_term(g, pred, target, range, &weights, cfg)?;
    let neg = g.scale(idx, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `(1/(C·H'·W')) ‖φ(pred) − φ(target)‖²` with grayscale inputs repeated to
/// three channels.
pub fn perceptual_term(
    g: &mut Graph,
    pred: Var,
    target: Var,
    extractor: &dyn FeatureExtractor,
) -> Result<Var> {
    check_pair(g, pred, target)?;
    let p3 = g.repeat_channels(pred, 3)?;
    let t3 = g.repeat_channels(target, 3)?;
    let fp = extractor.features(g, p3)?;
    let ft = extractor.features(g, t3)?;
    let d = g.sub(fp, ft)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// pixel + λ·perceptual + ms-ssim
    WithPerceptual,
    /// pixel + ms-ssim
    WithoutPerceptual,
}

/// Loss nodes of one composite evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CompositeTerms {
    pub branch: Branch,
    pub pixel: Var,
    pub ssim: Var,
    pub perceptual: Option<Var>,
    pub total: Var,
}

/// Per-term values of the composite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub branch: Branch,
    pub pixel: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub total: f64,
}

impl CompositeTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            branch: self.branch,
            pixel: v(self.pixel),
            ssim: v(self.ssim),
            perceptual: self.perceptual.map(v),
            total: v(self.total),
        }
    }
}

/// Builds the composite loss, picking the branch from `step_size` alone.
pub fn composite_term(
    g: &mut Graph,
    pred: Var,
    target: Var,
    step_size: f64,
    cfg: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<CompositeTerms> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    let branch = if cfg.uses_perceptual(step_size) {
        Branch::WithPerceptual
    } else {
        Branch::WithoutPerceptual
    };
    if branch == Branch::WithPerceptual && extractor.is_none() {
        return Err(Error::ExtractorMissing);
    }
    let pixel = pixel_term(g, pred, target)?;
    let ssim = ms_ssim_loss_term(g, pred, target, cfg)?;
    let mut total = g.add(pixel, ssim)?;
    let mut perceptual = None;
    if let (Branch::WithPerceptual, Some(ex)) = (branch, extractor) {
        let p = perceptual_term(g, pred, target, ex)?;
        let weighted = g.scale(p, cfg.lambda);
        total = g.add(total, weighted)?;
        perceptual = Some(p);
    }
    Ok(CompositeTerms {
        branch,
        pixel,
        ssim,
        perceptual,
        total,
    })
}

fn image_tensor(a: &Array2<f64>) -> Tensor {
    let (h, w) = a.dim();
    Tensor::from_vec([1, 1, h, w], a.iter().copied().collect())
}

fn pair(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(Graph, Var, Var)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dim(),
            target.dim()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(image_tensor(pred));
    let t = g.constant(image_tensor(target));
    Ok((g, p, t))
}

pub fn pixel_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    let (mut g, p, t) = pair(pred, target)?;
    let l = pixel_term(&mut g, p, t)?;
    Ok(g.value(l).data()[0])
}

/// `1 − MS-SSIM` over all configured scales; errors, naming the feasible
/// scale count, when the image is too small.
pub fn ms_ssim_loss(pred: &Array2<f64>, target: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    let (mut g, p, t) = pair(pred, target)?;
    let range = dynamic_range(g.value(t));
    let idx = ms_ssim_term(&mut g, p, t, range, &cfg.msssim_weights, cfg)?;
    Ok(1.0 - g.value(idx).data()[0])
}

pub fn perceptual_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<f64> {
    let ex = extractor.ok_or(Error::ExtractorMissing)?;
    let (mut g, p, t) = pair(pred, target)?;
    let l = perceptual_term(&mut g, p, t, ex)?;
    Ok(g.value(l).data()[0])
}

pub fn composite_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    step_size: f64,
    cfg: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<LossBreakdown> {
    let (mut g, p, t) = pair(pred, target)?;
    let terms = composite_term(&mut g, p, t, step_size, cfg, extractor)?;
    Ok(terms.breakdown(&g))
}
