//! Dataset building, training, inference and dose sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use misr4d_tensor::{Graph, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{bf_sum_upsampled, idpc, parallax, ParallaxConfig};
use crate::corruption::{
    apply_dose, corrupt_views, derive_seed, sample_corruption, CorruptionConfig, Dose, DoseSpec,
};
use crate::datacube::{DataCube4D, ScanCalibration};
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint};
use crate::losses::{composite_term, ConvStack, FeatureExtractor, LossBreakdown, LossConfig};
use crate::metrics::{score, Scores};
use crate::multiview::{normalize_views, ViewSettings, ViewStack};
use crate::network::{
    build_forward, forward, init_model, Adam, Mode, ModelConfig, ParameterSet, BN_MOMENTUM,
};
use crate::resample::upsample_bicubic;
use crate::simulator::{make_phantom, simulate_scan, GroundTruth, ObjectGrid, PhantomRecipe};

/// Environment variable replacing every configured seed.
pub const SEED_ENV: &str = "MISR4D_SEED";

const INDEX_FILE: &str = "index.json";

/// Reads [`SEED_ENV`], if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn one() -> usize {
    1
}

fn default_scan() -> (usize, usize) {
    (64, 64)
}

fn default_upscale() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub recipe: PhantomRecipe,
    /// Copies with seeds `seed, seed + 1, ...`.
    #[serde(default = "one")]
    pub variants: usize,
}

/// Phantom recipes plus the acquisition they are simulated under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub calib: ScanCalibration,
    #[serde(default = "default_scan")]
    pub scan_shape: (usize, usize),
    #[serde(default = "default_upscale")]
    pub upscale: usize,
    #[serde(default)]
    pub views: ViewSettings,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.calib.validate()?;
        if self.samples.is_empty() {
            return Err(Error::Config("manifest lists no samples".into()));
        }
        if self.scan_shape.0 == 0 || self.scan_shape.1 == 0 || self.upscale == 0 {
            return Err(Error::Config(
                "scan_shape and upscale must be positive".into(),
            ));
        }
        if let Some(i) = self.samples.iter().position(|e| e.variants == 0) {
            return Err(Error::Config(format!("sample {i}: variants must be >= 1")));
        }
        self.views.count(&self.calib)?;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.samples.iter().map(|e| e.variants).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Container path relative to the dataset directory.
    pub file: String,
    pub recipe: PhantomRecipe,
}

/// `index.json` of a built dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub calib: ScanCalibration,
    pub scan_shape: (usize, usize),
    pub upscale: usize,
    pub views: ViewSettings,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.join(INDEX_FILE),
        )?)?)
    }
}

/// Simulates one clean (infinite-dose, unit-flux) sample.
pub fn simulate_sample(
    recipe: &PhantomRecipe,
    calib: &ScanCalibration,
    scan_shape: (usize, usize),
    upscale: usize,
) -> Result<(DataCube4D, GroundTruth)> {
    let grid = ObjectGrid::ground_truth(calib.step_size, scan_shape, upscale);
    let phantom = make_phantom(recipe, &grid)?;
    simulate_scan(&phantom, calib, scan_shape)
}

/// Writes one container per sample and `index.json` into `out`.
pub fn build_dataset(manifest: &DatasetManifest, out: &Path) -> Result<DatasetIndex> {
    manifest.validate()?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for (i, entry) in manifest.samples.iter().enumerate() {
        for k in 0..entry.variants {
            let mut recipe = entry.recipe.clone();
            recipe.seed = recipe.seed.wrapping_add(k as u64);
            let fail = |e: Error| Error::Config(format!("manifest sample {i} variant {k}: {e}"));
            let (cube, gt) = simulate_sample(
                &recipe,
                &manifest.calib,
                manifest.scan_shape,
                manifest.upscale,
            )
            .map_err(fail)?;
            let file = format!("sample_{:04}.h5", entries.len());
            io::save_cube(&out.join(&file), &cube)?;
            io::save_ground_truth(&out.join(&file), &gt)?;
            entries.push(IndexEntry { file, recipe });
        }
    }
    let index = DatasetIndex {
        calib: manifest.calib.clone(),
        scan_shape: manifest.scan_shape,
        upscale: manifest.upscale,
        views: manifest.views,
        entries,
    };
    fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Cosine decay to `lr · final_lr_fraction` over the run; 1 keeps lr constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr: 1e-4,
            betas: (0.9, 0.999),
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.final_lr_fraction == 1.0 {
            return self.lr;
        }
        let t = step as f64 / (total - 1) as f64;
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

fn default_epochs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Directory produced by [`build_dataset`].
    pub dataset: PathBuf,
    /// Index entries to train on; all when absent.
    #[serde(default)]
    pub train_samples: Option<Vec<usize>>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Step log (JSON lines); defaults to `<checkpoint_dir>.log.jsonl`.
    #[serde(default)]
    pub log: Option<PathBuf>,
    /// Save every this many epochs; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Feature extractor weights for steps below the perceptual threshold.
    #[serde(default)]
    pub extractor: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(seed) = seed_override()? {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }

    /// Replaces the initialization/shuffle seed and the corruption seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corruption.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.corruption.validate()?;
        if self.optimizer.name != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer {:?}",
                self.optimizer.name
            )));
        }
        let (b1, b2) = self.optimizer.betas;
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(
                "optimizer needs lr > 0 and betas in [0, 1)".into(),
            ));
        }
        if !(self.optimizer.final_lr_fraction > 0.0 && self.optimizer.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut name = self
                .checkpoint_dir
                .file_name()
                .unwrap_or_default()
                .to_os_string();
            name.push(".log.jsonl");
            self.checkpoint_dir.with_file_name(name)
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub samples: Vec<usize>,
    pub doses: Vec<Dose>,
    pub pixel: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Final weights as stored in the checkpoint.
    pub params: ParameterSet,
    pub views: ViewSettings,
}

struct TrainSample {
    index: usize,
    raw: ViewStack,
    target: Array2<f64>,
}

fn load_training_sample(
    dir: &Path,
    index: usize,
    entry: &IndexEntry,
    views: &ViewSettings,
) -> Result<TrainSample> {
    let path = dir.join(&entry.file);
    let cube = io::load_cube(&path)?;
    // only clean data is stored; corruption happens per step
    if cube.signed() {
        return Err(Error::Config(format!(
            "{}: dataset cubes must be unsigned clean data",
            path.display()
        )));
    }
    let gt = io::load_ground_truth(&path)?
        .ok_or_else(|| Error::Config(format!("{} has no ground truth", path.display())))?;
    Ok(TrainSample {
        index,
        raw: views.extract(&cube)?,
        target: gt.phase,
    })
}

fn stack_batch(items: &[Array3<f64>]) -> Tensor {
    let (v, h, w) = items[0].dim();
    let mut data = Vec::with_capacity(items.len() * v * h * w);
    for a in items {
        data.extend(a.iter());
    }
    Tensor::from_vec([items.len(), v, h, w], data)
}

/// Corrupts `raw` with `spec` and normalizes it for the network.
pub fn corrupted_input(raw: &ViewStack, spec: &DoseSpec) -> Result<Array3<f64>> {
    let mut noisy = raw.clone();
    noisy.views = corrupt_views(&raw.views, raw.pixels_per_view, raw.calib.step_size, spec)?;
    Ok(normalize_views(&noisy)?.views)
}

/// Runs the training loop described by `cfg`, logging every step and
/// checkpointing at the configured cadence.
pub fn train(cfg: &TrainingConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let index = DatasetIndex::load(&cfg.dataset)?;
    let chosen: Vec<usize> = match &cfg.train_samples {
        Some(ids) => ids.clone(),
        None => (0..index.entries.len()).collect(),
    };
    if chosen.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let v = index.views.count(&index.calib)?;
    if v != cfg.model.in_views {
        return Err(Error::ViewMismatch {
            expected: cfg.model.in_views,
            found: v,
            radius_fraction: index.views.radius_fraction,
            bin: index.views.bin,
        });
    }
    let (h, w) = index.scan_shape;
    cfg.model.check_input(h, w)?;
    let mut samples = Vec::new();
    for &i in &chosen {
        let entry = index
            .entries
            .get(i)
            .ok_or_else(|| Error::Config(format!("training sample {i} not in index")))?;
        samples.push(load_training_sample(&cfg.dataset, i, entry, &index.views)?);
    }
    let extractor = match &cfg.extractor {
        Some(p) => Some(ConvStack::load(p)?),
        None => None,
    };
    let extractor_ref = extractor.as_ref().map(|e| e as &dyn FeatureExtractor);
    let step_size = index.calib.step_size;
    if cfg.loss.uses_perceptual(step_size) && extractor_ref.is_none() {
        return Err(Error::ExtractorMissing);
    }

    let mut params = match &cfg.init_from {
        Some(p) => {
            let ck = io::load_checkpoint(p)?;
            if ck.params.config != cfg.model {
                return Err(Error::Config(
                    "init_from checkpoint has a different model config".into(),
                ));
            }
            ck.params
        }
        None => init_model(&cfg.model, cfg.seed)?,
    };
    let mut adam = Adam::new(cfg.optimizer.lr, cfg.optimizer.betas);
    let log_path = cfg.log_path();
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut log = fs::File::create(&log_path)?;
    let provenance = |step: usize| {
        serde_json::json!({
            "step": step,
            "seed": cfg.seed,
            "corruption_seed": cfg.corruption.seed,
            "dataset": cfg.dataset,
            "train_samples": chosen,
        })
    };
    let save = |p: &ParameterSet, step: usize| {
        io::save_checkpoint(
            &cfg.checkpoint_dir,
            &Checkpoint {
                params: p.round_to_f32(),
                views: index.views,
                provenance: provenance(step),
            },
        )
    };

    let total_steps = cfg.epochs * chosen.len().div_ceil(cfg.batch_size);
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let mut doses = Vec::new();
            for &k in batch {
                let sample = &samples[k];
                let spec = sample_corruption(epoch as u64, sample.index as u64, &cfg.corruption)?;
                inputs.push(corrupted_input(&sample.raw, &spec)?);
                targets.push(sample.target.clone().insert_axis(Axis(0)));
                doses.push(spec.dose);
            }
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let x = g.constant(stack_batch(&inputs));
            let t = g.constant(stack_batch(&targets));
            let pass = build_forward(&mut g, &params, &vars, x, Mode::Train)?;
            let terms =
                composite_term(&mut g, pass.output, t, step_size, &cfg.loss, extractor_ref)?;
            let b: LossBreakdown = terms.breakdown(&g);
            let step = records.len();
            if !b.total.is_finite() {
                save(&params, step)?;
                return Err(Error::Numerical(format!(
                    "loss became {} at step {step} (epoch {epoch}); last finite weights saved",
                    b.total
                )));
            }
            let mut grads = g.backward(terms.total)?;
            let before = params.clone();
            adam.lr = cfg.optimizer.lr_at(step, total_steps);
            params.update_running_stats(&g, &pass, BN_MOMENTUM);
            adam.update(&mut params, &vars, &mut grads);
            if !params.is_finite() {
                save(&before, step)?;
                return Err(Error::Numerical(format!(
                    "weights became non-finite at step {step}; last finite weights saved"
                )));
            }
            let rec = StepRecord {
                step,
                epoch,
                samples: batch.iter().map(|&k| samples[k].index).collect(),
                doses,
                pixel: b.pixel,
                ssim: b.ssim,
                perceptual: b.perceptual,
                total: b.total,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            records.push(rec);
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save(&params, records.len())?;
        }
    }
    save(&params, records.len())?;
    Ok(TrainReport {
        steps: records,
        params: params.round_to_f32(),
        views: index.views,
    })
}

/// Reconstructs the `(rH, rW)` image of `cube` with the checkpoint's view recipe.
pub fn infer(ckpt: &Checkpoint, cube: &DataCube4D) -> Result<Array2<f64>> {
    let stack = ckpt.views.extract(cube)?;
    if stack.len() != ckpt.params.config.in_views {
        return Err(Error::ViewMismatch {
            expected: ckpt.params.config.in_views,
            found: stack.len(),
            radius_fraction: ckpt.views.radius_fraction,
            bin: ckpt.views.bin,
        });
    }
    forward(&ckpt.params, &normalize_views(&stack)?.views)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Model,
    BfSum,
    Idpc,
    Parallax,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::BfSum => "bf_sum",
            Method::Idpc => "idpc",
            Method::Parallax => "parallax",
        }
    }
}

/// Baseline reconstruction on the `(rH, rW)` grid.
pub fn run_baseline(
    method: Method,
    cube: &DataCube4D,
    views: &ViewSettings,
    r: usize,
) -> Result<Array2<f64>> {
    match method {
        Method::BfSum => bf_sum_upsampled(cube, &views.mask(cube.calib())?, r),
        Method::Idpc => Ok(upsample_bicubic(&idpc(cube).0, r)),
        Method::Parallax => {
            let stack = views.extract(cube)?;
            let cfg = ParallaxConfig {
                upscale: r,
                ..ParallaxConfig::default()
            };
            Ok(parallax(&stack, &cfg)?.image)
        }
        Method::Model => Err(Error::InvalidParameter(
            "the model is not a baseline".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dose: Dose,
    pub method: Method,
    pub scores: Option<Scores>,
    /// Why a method produced no image at this dose.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn get(&self, dose: Dose, method: Method) -> Option<&Scores> {
        self.rows
            .iter()
            .find(|r| r.dose == dose && r.method == method)
            .and_then(|r| r.scores.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dose,method,psnr,ssim,cnr,cutoff,note\n");
        for r in &self.rows {
            let (p, s, c, f) = match &r.scores {
                Some(x) => (
                    x.psnr.to_string(),
                    x.ssim.to_string(),
                    x.cnr.to_string(),
                    x.cutoff.to_string(),
                ),
                None => Default::default(),
            };
            out.push_str(&format!(
                "{},{},{p},{s},{c},{f},{}\n",
                r.dose,
                r.method.name(),
                r.note.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }

    /// Writes `sweep.csv` and `sweep.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), self.to_csv())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Seed of the corruption draw used for `dose` in a sweep.
pub fn sweep_seed(seed: u64, dose: Dose) -> u64 {
    derive_seed(seed, dose.0.to_bits(), 0)
}

/// Corrupts the clean `cube` at every dose, reconstructs with the model and
/// each baseline and scores against `truth`.
pub fn dose_sweep(
    ckpt: &Checkpoint,
    cube: &DataCube4D,
    truth: &GroundTruth,
    doses: &[Dose],
    baselines: &[Method],
    seed: u64,
) -> Result<SweepReport> {
    let r = ckpt.params.config.r;
    let mut rows = Vec::new();
    for &dose in doses {
        let spec = DoseSpec {
            dose,
            gaussian_sigma: 0.0,
            bias: 0.0,
            seed: sweep_seed(seed, dose),
        };
        let noisy = apply_dose(cube, &spec)?;
        let methods = std::iter::once(Method::Model).chain(baselines.iter().copied());
        for method in methods {
            let image = match method {
                Method::Model => infer(ckpt, &noisy),
                m => run_baseline(m, &noisy, &ckpt.views, r),
            };
            let row = match image.and_then(|img| score(&img, &truth.phase, truth.pixel_size)) {
                Ok(scores) => SweepRow {
                    dose,
                    method,
                    scores: Some(scores),
                    note: None,
                },
                // a baseline failing at low dose is a result, not an abort
                Err(e) if method != Method::Model => SweepRow {
                    dose,
                    method,
                    scores: None,
                    note: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(SweepReport { rows })
}
