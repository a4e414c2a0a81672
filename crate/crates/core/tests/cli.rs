use std::path::Path;
use std::process::{Command, Output};

fn misr4d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_misr4d"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MISR4D_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const MANIFEST: &str = r#"{
  "scan_shape": [16, 16],
  "samples": [
    {"recipe": {"kind": "crystal", "seed": 1, "params": {"lattice": [[6.5, 0], [0, 6.5]], "amplitude": 0.5, "sigma": 1.0}}},
    {"recipe": {"kind": "sinusoid", "seed": 2, "params": {"period": 12.0, "amplitude": 0.4}}}
  ]
}"#;

const TRAIN: &str = r#"{
  "dataset": "data",
  "train_samples": [0],
  "model": {"encoder_channels": [4, 8]},
  "epochs": 2,
  "seed": 1,
  "checkpoint_dir": "ckpt"
}"#;

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("m.json"), MANIFEST).unwrap();
    std::fs::write(d.join("train.json"), TRAIN).unwrap();

    assert!(ok(&misr4d(
        &["simulate", "--manifest", "m.json", "--out", "data"],
        d
    ))
    .contains("2 samples"));
    let noisy = ok(&misr4d(
        &[
            "corrupt",
            "--in",
            "data/sample_0001.h5",
            "--dose",
            "300",
            "--sigma",
            "0",
            "--seed",
            "7",
        ],
        d,
    ));
    assert_eq!(noisy.trim(), "data/sample_0001.dose300.h5");
    let views = ok(&misr4d(
        &["views", "--in", "data/sample_0001.dose300.h5"],
        d,
    ));
    assert!(views.starts_with("16 views"), "{views}");

    assert!(ok(&misr4d(&["train", "--config", "train.json"], d)).contains("2 steps"));
    assert_eq!(
        std::fs::read_to_string(d.join("ckpt.log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    ok(&misr4d(
        &[
            "infer",
            "--ckpt",
            "ckpt",
            "--in",
            "data/sample_0001.dose300.h5",
            "--out",
            "model.tiff",
        ],
        d,
    ));
    let img = misr4d::io::read_tiff(&d.join("model.tiff")).unwrap();
    assert_eq!(img.dim(), (48, 48));
    for m in ["bf", "idpc", "parallax"] {
        ok(&misr4d(
            &[
                "baseline",
                "--method",
                m,
                "--in",
                "data/sample_0001.dose300.h5",
                "--out",
                &format!("{m}.tiff"),
            ],
            d,
        ));
        assert_eq!(
            misr4d::io::read_tiff(&d.join(format!("{m}.tiff")))
                .unwrap()
                .dim(),
            (48, 48)
        );
    }
    ok(&misr4d(
        &[
            "evaluate",
            "--pred",
            "bf.tiff",
            "--gt",
            "data/sample_0001.h5",
            "--report",
            "r.json",
        ],
        d,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report["psnr"].as_f64().unwrap().is_finite());

    let csv = ok(&misr4d(
        &[
            "sweep", "--ckpt", "ckpt", "--doses", "100,inf", "--out", "sw",
        ],
        d,
    ));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(d.join("sw/sweep.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        misr4d(&["train", "--config", "missing.json"], d)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(misr4d(&["bogus"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"samples": []}"#).unwrap();
    let out = misr4d(&["simulate", "--manifest", "bad.json", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no samples"));

    // non-finite ground truth makes the loss non-finite
    std::fs::write(d.join("m.json"), MANIFEST).unwrap();
    ok(&misr4d(
        &["simulate", "--manifest", "m.json", "--out", "data"],
        d,
    ));
    let p = d.join("data/sample_0000.h5");
    let mut gt = misr4d::io::load_ground_truth(&p).unwrap().unwrap();
    gt.phase[[0, 0]] = f64::INFINITY;
    misr4d::io::save_ground_truth(&p, &gt).unwrap();
    std::fs::write(d.join("train.json"), TRAIN).unwrap();
    assert_eq!(
        misr4d(&["train", "--config", "train.json"], d)
            .status
            .code(),
        Some(3)
    );
}
