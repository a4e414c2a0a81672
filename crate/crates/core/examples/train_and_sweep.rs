//! A miniature end-to-end run: dataset, training, inference and a dose sweep.

use misr4d::corruption::Dose;
use misr4d::network::ModelConfig;
use misr4d::pipeline::*;
use misr4d::simulator::{CrystalParams, PhantomKind, PhantomRecipe};

fn main() -> misr4d::Result<()> {
    let dir = std::env::temp_dir().join("misr4d_example_run");
    let manifest = DatasetManifest {
        calib: Default::default(),
        scan_shape: (16, 16),
        upscale: 3,
        views: Default::default(),
        samples: vec![ManifestEntry {
            recipe: PhantomRecipe {
                kind: PhantomKind::Crystal(CrystalParams::square(6.5, 0.5, 1.0)),
                seed: 1,
                margin: None,
            },
            variants: 3,
        }],
    };
    build_dataset(&manifest, &dir.join("data"))?;

    let cfg = TrainingConfig {
        dataset: dir.join("data"),
        train_samples: Some(vec![0, 1]),
        model: ModelConfig {
            encoder_channels: vec![8, 16],
            ..ModelConfig::default()
        },
        loss: Default::default(),
        corruption: Default::default(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        epochs: 5,
        batch_size: 1,
        seed: 0,
        checkpoint_dir: dir.join("ckpt"),
        log: None,
        checkpoint_every: 0,
        extractor: None,
        init_from: None,
    };
    let report = train(&cfg)?;
    for r in report.steps.iter().step_by(3) {
        println!(
            "step {:>2} dose {:>6.1} total {:.4}",
            r.step, r.doses[0].0, r.total
        );
    }

    let ckpt = misr4d::io::load_checkpoint(&cfg.checkpoint_dir)?;
    let held_out = dir.join("data/sample_0002.h5");
    let cube = misr4d::io::load_cube(&held_out)?;
    let truth = misr4d::io::load_ground_truth(&held_out)?.expect("dataset stores ground truth");
    let sweep = dose_sweep(
        &ckpt,
        &cube,
        &truth,
        &[Dose(100.0), Dose(1000.0)],
        &[Method::BfSum],
        0,
    )?;
    print!("{}", sweep.to_csv());
    Ok(())
}
