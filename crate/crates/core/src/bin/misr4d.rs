use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use misr4d::corruption::{apply_dose, Dose, DoseSpec};
use misr4d::io;
use misr4d::metrics::score;
use misr4d::multiview::{normalize_views, ViewSettings};
use misr4d::pipeline::{self, DatasetIndex, DatasetManifest, Method, TrainingConfig};
use misr4d::{Error, Result};

#[derive(Parser)]
#[command(
    name = "misr4d",
    version,
    about = "Low-dose 4D-STEM multi-view super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a clean dataset from a phantom manifest.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply electron dose and read noise to a container's datacube.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        /// e/A^2, or "inf".
        #[arg(long)]
        dose: Dose,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        bias: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<input stem>.dose<dose>.h5`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract virtual bright-field views into the container.
    Views {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        bin: usize,
        #[arg(long, default_value_t = 0.9)]
        radius_fraction: f64,
        /// Store raw sums instead of per-view-mean normalized views.
        #[arg(long)]
        raw: bool,
    },
    /// Train from a JSON training config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct a container's datacube with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical reconstruction on the upsampled grid.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        upscale: usize,
        #[arg(long, default_value_t = 4)]
        bin: usize,
        #[arg(long, default_value_t = 0.9)]
        radius_fraction: f64,
    },
    /// Score a reconstruction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// TIFF image or a container with /ground_truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Angstrom per pixel, for TIFF ground truth.
        #[arg(long)]
        pixel_size: Option<f64>,
    },
    /// Score model and baselines across doses on one clean sample.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "100,200,300,500,1000,inf"
        )]
        doses: Vec<Dose>,
        /// Clean container; defaults to the first dataset sample not used in training.
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Bf,
    Idpc,
    Parallax,
}

impl From<BaselineArg> for Method {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Bf => Method::BfSum,
            BaselineArg::Idpc => Method::Idpc,
            BaselineArg::Parallax => Method::Parallax,
        }
    }
}

fn seed_or_env(seed: u64) -> Result<u64> {
    Ok(pipeline::seed_override()?.unwrap_or(seed))
}

fn default_corrupt_path(input: &Path, dose: Dose) -> PathBuf {
    let stem = input.file_stem().unwrap_or_default().to_string_lossy();
    input.with_file_name(format!("{stem}.dose{dose}.h5"))
}

/// First dataset entry outside the checkpoint's training set.
fn held_out_sample(ckpt: &io::Checkpoint) -> Result<PathBuf> {
    let dataset = ckpt.provenance["dataset"]
        .as_str()
        .ok_or_else(|| Error::Config("checkpoint records no dataset; pass --sample".into()))?;
    let dir = Path::new(dataset);
    let index = DatasetIndex::load(dir)?;
    let used: Vec<u64> = ckpt.provenance["train_samples"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64()).collect())
        .unwrap_or_default();
    let pick = (0..index.entries.len())
        .find(|i| !used.contains(&(*i as u64)))
        .unwrap_or(0);
    Ok(dir.join(&index.entries[pick].file))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { manifest, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let index = pipeline::build_dataset(&m, &out)?;
            println!(
                "{} samples written to {}",
                index.entries.len(),
                out.display()
            );
        }
        Command::Corrupt {
            input,
            dose,
            sigma,
            bias,
            seed,
            out,
        } => {
            let cube = io::load_cube(&input)?;
            let spec = DoseSpec {
                dose,
                gaussian_sigma: sigma,
                bias,
                seed: seed_or_env(seed)?,
            };
            let noisy = apply_dose(&cube, &spec)?;
            let out = out.unwrap_or_else(|| default_corrupt_path(&input, dose));
            io::save_cube(&out, &noisy)?;
            if let Some(gt) = io::load_ground_truth(&input)? {
                io::save_ground_truth(&out, &gt)?;
            }
            println!("{}", out.display());
        }
        Command::Views {
            input,
            bin,
            radius_fraction,
            raw,
        } => {
            let cube = io::load_cube(&input)?;
            let settings = ViewSettings {
                radius_fraction,
                bin,
            };
            let mut stack = settings.extract(&cube)?;
            if !raw {
                stack = normalize_views(&stack)?;
            }
            io::save_views(&input, &stack)?;
            println!("{} views of {:?}", stack.len(), stack.scan_shape());
        }
        Command::Train { config } => {
            let cfg = TrainingConfig::load(&config)?;
            let report = pipeline::train(&cfg)?;
            let last = report.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
            println!(
                "{} steps, final loss {last:.5}, checkpoint {}",
                report.steps.len(),
                cfg.checkpoint_dir.display()
            );
        }
        Command::Infer { ckpt, input, out } => {
            let ck = io::load_checkpoint(&ckpt)?;
            let img = pipeline::infer(&ck, &io::load_cube(&input)?)?;
            io::write_tiff(&out, &img)?;
        }
        Command::Baseline {
            method,
            input,
            out,
            upscale,
            bin,
            radius_fraction,
        } => {
            let cube = io::load_cube(&input)?;
            let settings = ViewSettings {
                radius_fraction,
                bin,
            };
            let img = pipeline::run_baseline(method.into(), &cube, &settings, upscale)?;
            io::write_tiff(&out, &img)?;
        }
        Command::Evaluate {
            pred,
            gt,
            report,
            pixel_size,
        } => {
            let pred = io::read_tiff(&pred)?;
            let is_tiff = matches!(
                gt.extension().and_then(|e| e.to_str()),
                Some("tif") | Some("tiff")
            );
            let (truth, px) = if is_tiff {
                (io::read_tiff(&gt)?, pixel_size.unwrap_or(1.0))
            } else {
                let g = io::load_ground_truth(&gt)?.ok_or_else(|| {
                    Error::Config(format!("{} has no /ground_truth", gt.display()))
                })?;
                let px = pixel_size.unwrap_or(g.pixel_size);
                (g.phase, px)
            };
            let scores = score(&pred, &truth, px)?;
            std::fs::write(&report, serde_json::to_string_pretty(&scores)?)?;
            println!(
                "psnr {:.3} dB  ssim {:.4}  cnr {:.3}",
                scores.psnr, scores.ssim, scores.cnr
            );
        }
        Command::Sweep {
            ckpt,
            doses,
            sample,
            out,
            seed,
        } => {
            let ck = io::load_checkpoint(&ckpt)?;
            let sample = match sample {
                Some(s) => s,
                None => held_out_sample(&ck)?,
            };
            let cube = io::load_cube(&sample)?;
            let truth = io::load_ground_truth(&sample)?.ok_or_else(|| {
                Error::Config(format!("{} has no /ground_truth", sample.display()))
            })?;
            let report = pipeline::dose_sweep(
                &ck,
                &cube,
                &truth,
                &doses,
                &[Method::BfSum, Method::Idpc, Method::Parallax],
                seed_or_env(seed)?,
            )?;
            report.write(&out)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
