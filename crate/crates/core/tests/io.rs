use misr4d::datacube::{transpose_domains, DataCube4D, Layout, ScanCalibration};
use misr4d::io::*;
use misr4d::multiview::{normalize_views, ViewSettings};
use misr4d::network::{forward, init_model, ModelConfig};
use misr4d::simulator::GroundTruth;
use misr4d::Error;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn calib(k: usize) -> ScanCalibration {
    ScanCalibration {
        detector_shape: (k, k),
        center: (k as f64 / 2.0 - 0.5, k as f64 / 2.0 - 0.5),
        defocus: -250.5,
        ..ScanCalibration::default()
    }
}

fn random_cube(seed: u64) -> DataCube4D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Array4::from_shape_simple_fn((3, 5, 8, 8), || rng.gen_range(0.0..2.0));
    DataCube4D::new(v, calib(8), Layout::RealMajor, false).unwrap()
}

fn f32_round<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    a.mapv(|v| v as f32 as f64)
}

#[test]
fn cube_round_trip_both_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let cube = random_cube(1);
    for c in [cube.clone(), transpose_domains(&cube)] {
        let p = dir.path().join(format!("{}.h5", c.layout().tag()));
        save_cube(&p, &c).unwrap();
        let back = load_cube(&p).unwrap();
        assert_eq!(back.layout(), c.layout());
        assert_eq!(back.calib(), c.calib());
        assert!(!back.signed());
        assert_eq!(back.values(), &f32_round(c.values()));
        assert_eq!(load_ground_truth(&p).unwrap(), None);
        assert!(load_views(&p).unwrap().is_none());
    }
}

#[test]
fn signed_flag_survives() {
    let dir = tempfile::tempdir().unwrap();
    let v = Array4::from_elem((2, 2, 8, 8), -1.5);
    let c = DataCube4D::new(v, calib(8), Layout::RealMajor, true).unwrap();
    let p = dir.path().join("s.h5");
    save_cube(&p, &c).unwrap();
    assert_eq!(load_cube(&p).unwrap(), c);
}

#[test]
fn reads_uint32_counts_from_other_writers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("u.h5");
    save_cube(&p, &random_cube(2)).unwrap();
    let counts = Array4::from_shape_fn((3, 5, 8, 8), |(a, b, c, d)| (a + b + c * d) as u32);
    {
        // swap the payload for integer counts, keeping the attributes
        let f = hdf5::File::open_rw(&p).unwrap();
        let attrs = load_cube(&p).unwrap();
        f.unlink("datacube").unwrap();
        f.new_dataset_builder()
            .with_data(&counts)
            .create("datacube")
            .unwrap();
        drop(f);
        let f = hdf5::File::open_rw(&p).unwrap();
        let ds = f.dataset("datacube").unwrap();
        let c = attrs.calib();
        let layout: hdf5::types::VarLenUnicode = "RQ".parse().unwrap();
        ds.new_attr::<hdf5::types::VarLenUnicode>()
            .create("layout")
            .unwrap()
            .write_scalar(&layout)
            .unwrap();
        for (k, v) in [
            ("step_size_A", c.step_size),
            ("energy_keV", c.energy),
            ("convergence_mrad", c.convergence),
            ("defocus_A", c.defocus),
            ("detector_pixel_mrad", c.detector_pixel),
            ("center_x", c.center.0),
            ("center_y", c.center.1),
        ] {
            ds.new_attr::<f32>()
                .create(k)
                .unwrap()
                .write_scalar(&(v as f32))
                .unwrap();
        }
        ds.new_attr::<i32>()
            .create("signed")
            .unwrap()
            .write_scalar(&0)
            .unwrap();
    }
    let back = load_cube(&p).unwrap();
    assert_eq!(back.values(), &counts.mapv(f64::from));
    assert_eq!(back.calib().defocus, -250.5);
}

#[test]
fn missing_attribute_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.h5");
    let f = hdf5::File::create(&p).unwrap();
    f.new_dataset_builder()
        .with_data(&Array4::<f32>::zeros((1, 1, 8, 8)))
        .create("datacube")
        .unwrap();
    drop(f);
    assert!(load_cube(&p).is_err());
    assert!(matches!(
        load_cube(&dir.path().join("none.h5")),
        Err(Error::Hdf5(_))
    ));
}

#[test]
fn ground_truth_and_views_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.h5");
    let cube = random_cube(3);
    save_cube(&p, &cube).unwrap();
    let gt = GroundTruth {
        phase: Array2::from_shape_fn((9, 15), |(i, j)| (i as f64 - j as f64) * 0.1),
        pixel_size: 4.0 / 3.0,
        upscale: 3,
    };
    save_ground_truth(&p, &gt).unwrap();
    // overwriting replaces rather than failing
    save_ground_truth(&p, &gt).unwrap();
    let back = load_ground_truth(&p).unwrap().unwrap();
    assert_eq!(back.phase, f32_round(&gt.phase));
    assert_eq!((back.pixel_size, back.upscale), (gt.pixel_size, 3));

    let settings = ViewSettings {
        radius_fraction: 1.0,
        bin: 1,
    };
    let stack = normalize_views(&settings.extract(&cube).unwrap()).unwrap();
    save_views(&p, &stack).unwrap();
    let views = load_views(&p).unwrap().unwrap();
    assert_eq!(views.views, f32_round(&stack.views));
    assert_eq!(views.normalization, stack.normalization);
    assert_eq!(views.pixels_per_view, 1);
    for (a, b) in views.angles.iter().zip(&stack.angles) {
        assert_eq!(a.0, b.0 as f32 as f64);
        assert_eq!(a.1, b.1 as f32 as f64);
    }
    assert_eq!(load_cube(&p).unwrap().values(), &f32_round(cube.values()));
}

#[test]
fn tiff_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img.tiff");
    let img = Array2::from_shape_fn((7, 11), |(i, j)| (i * 11 + j) as f64 * 0.25 - 3.0);
    write_tiff(&p, &img).unwrap();
    assert_eq!(read_tiff(&p).unwrap(), img);
    std::fs::write(&p, b"not a tiff").unwrap();
    assert!(read_tiff(&p).is_err());
}

#[test]
fn reads_integer_tiff() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("u16.tiff");
    let data: Vec<u16> = (0..12).collect();
    let mut enc = tiff::encoder::TiffEncoder::new(std::fs::File::create(&p).unwrap()).unwrap();
    enc.write_image::<tiff::encoder::colortype::Gray16>(4, 3, &data)
        .unwrap();
    let img = read_tiff(&p).unwrap();
    assert_eq!(img.dim(), (3, 4));
    assert_eq!(img[[2, 1]], 9.0);
}

fn small_model() -> ModelConfig {
    ModelConfig {
        in_views: 4,
        encoder_channels: vec![4, 8],
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck_dir = dir.path().join("ckpt");
    let params = init_model(&small_model(), 4).unwrap().round_to_f32();
    let ck = Checkpoint {
        params: params.clone(),
        views: ViewSettings::default(),
        provenance: serde_json::json!({"step": 7}),
    };
    save_checkpoint(&ck_dir, &ck).unwrap();
    let back = load_checkpoint(&ck_dir).unwrap();
    assert_eq!(back, ck);
    let x = Array3::from_shape_fn((4, 8, 8), |(v, i, j)| ((v + i * j) % 5) as f64);
    assert_eq!(
        forward(&back.params, &x).unwrap(),
        forward(&params, &x).unwrap()
    );

    // raw little-endian float32
    let bytes = std::fs::read(ck_dir.join("head.prelu.f32")).unwrap();
    assert_eq!(bytes, 0.25f32.to_le_bytes());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ck_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["model"]["in_views"], 4);
    assert_eq!(manifest["views"]["bin"], 4);

    // saving again replaces the directory
    let mut changed = ck.clone();
    changed.provenance = serde_json::json!({"step": 8});
    save_checkpoint(&ck_dir, &changed).unwrap();
    assert_eq!(load_checkpoint(&ck_dir).unwrap().provenance["step"], 8);
}

#[test]
fn damaged_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck_dir = dir.path().join("ckpt");
    let ck = Checkpoint {
        params: init_model(&small_model(), 4).unwrap(),
        views: ViewSettings::default(),
        provenance: serde_json::Value::Null,
    };
    save_checkpoint(&ck_dir, &ck).unwrap();
    std::fs::write(ck_dir.join("head.prelu.f32"), [0u8; 3]).unwrap();
    assert!(matches!(load_checkpoint(&ck_dir), Err(Error::Shape(_))));
    std::fs::write(ck_dir.join("head.prelu.f32"), f32::NAN.to_le_bytes()).unwrap();
    assert!(matches!(load_checkpoint(&ck_dir), Err(Error::Numerical(_))));
}
