//! HDF5 containers, single-image TIFF files and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hdf5::types::VarLenUnicode;
use ndarray::{Array2, Array3, Array4, ArrayD, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::datacube::{DataCube4D, Layout, ScanCalibration};
use crate::error::{Error, Result};
use crate::multiview::{Normalization, ViewSettings, ViewStack};
use crate::network::{ModelConfig, ParameterSet};
use crate::simulator::GroundTruth;
use misr4d_tensor::Tensor;

const CUBE: &str = "datacube";
const GROUND_TRUTH: &str = "ground_truth";
const VIEWS: &str = "views";
const VIEW_ANGLES: &str = "view_angles_mrad";

/// Failures surface as `Error::Hdf5`; the library's own stderr trace is suppressed.
/// The handler is per thread, so every entry point resets it.
fn quiet() {
    hdf5::silence_errors(true);
}

fn to_f32<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f32, D> {
    a.mapv(|v| v as f32)
}

fn write_attr(loc: &hdf5::Location, name: &str, v: f64) -> Result<()> {
    loc.new_attr::<f64>().create(name)?.write_scalar(&v)?;
    Ok(())
}

fn read_attr(loc: &hdf5::Location, name: &str) -> Result<f64> {
    let a = loc
        .attr(name)
        .map_err(|_| Error::Config(format!("container attribute {name} missing")))?;
    // integer attributes written by other tools are accepted too
    if a.dtype()?.is::<f64>() {
        Ok(a.read_scalar::<f64>()?)
    } else if a.dtype()?.is::<f32>() {
        Ok(a.read_scalar::<f32>()? as f64)
    } else {
        Ok(a.read_scalar::<i64>()? as f64)
    }
}

fn replace(file: &hdf5::File, name: &str) -> Result<()> {
    if file.link_exists(name) {
        file.unlink(name)?;
    }
    Ok(())
}

fn read_real(ds: &hdf5::Dataset) -> Result<ArrayD<f64>> {
    let dt = ds.dtype()?;
    if dt.is::<u32>() {
        Ok(ds.read_dyn::<u32>()?.mapv(|v| v as f64))
    } else if dt.is::<f64>() {
        Ok(ds.read_dyn::<f64>()?)
    } else {
        Ok(ds.read_dyn::<f32>()?.mapv(|v| v as f64))
    }
}

fn dims<D: ndarray::Dimension>(a: ArrayD<f64>, what: &str) -> Result<ndarray::Array<f64, D>> {
    let shape = a.shape().to_vec();
    a.into_dimensionality::<D>()
        .map_err(|_| Error::Shape(format!("{what} has shape {shape:?}")))
}

/// Creates (or truncates) a container holding `cube` as float32.
pub fn save_cube(path: &Path, cube: &DataCube4D) -> Result<()> {
    quiet();
    let file = hdf5::File::create(path)?;
    let ds = file
        .new_dataset_builder()
        .with_data(&to_f32(cube.values()))
        .create(CUBE)?;
    let c = cube.calib();
    let layout: VarLenUnicode = cube.layout().tag().parse().expect("ascii tag");
    ds.new_attr::<VarLenUnicode>()
        .create("layout")?
        .write_scalar(&layout)?;
    write_attr(&ds, "step_size_A", c.step_size)?;
    write_attr(&ds, "energy_keV", c.energy)?;
    write_attr(&ds, "convergence_mrad", c.convergence)?;
    write_attr(&ds, "defocus_A", c.defocus)?;
    write_attr(&ds, "detector_pixel_mrad", c.detector_pixel)?;
    write_attr(&ds, "center_x", c.center.0)?;
    write_attr(&ds, "center_y", c.center.1)?;
    ds.new_attr::<u8>()
        .create("signed")?
        .write_scalar(&(cube.signed() as u8))?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<DataCube4D> {
    quiet();
    let file = hdf5::File::open(path)?;
    let ds = file
        .dataset(CUBE)
        .map_err(|_| Error::Config(format!("{} has no /{CUBE}", path.display())))?;
    let values: Array4<f64> = dims(read_real(&ds)?, "datacube")?;
    let tag = ds.attr("layout")?.read_scalar::<VarLenUnicode>()?;
    let layout = Layout::from_tag(tag.as_str())?;
    let s = values.shape();
    let detector_shape = match layout {
        Layout::RealMajor => (s[2], s[3]),
        Layout::RecipMajor => (s[0], s[1]),
    };
    let calib = ScanCalibration {
        step_size: read_attr(&ds, "step_size_A")?,
        energy: read_attr(&ds, "energy_keV")?,
        convergence: read_attr(&ds, "convergence_mrad")?,
        defocus: read_attr(&ds, "defocus_A")?,
        detector_pixel: read_attr(&ds, "detector_pixel_mrad")?,
        detector_shape,
        center: (read_attr(&ds, "center_x")?, read_attr(&ds, "center_y")?),
    };
    let signed = read_attr(&ds, "signed")? != 0.0;
    DataCube4D::new(values, calib, layout, signed)
}

/// Adds `/ground_truth` to an existing container.
pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    quiet();
    let file = hdf5::File::open_rw(path)?;
    replace(&file, GROUND_TRUTH)?;
    let ds = file
        .new_dataset_builder()
        .with_data(&to_f32(&gt.phase))
        .create(GROUND_TRUTH)?;
    write_attr(&ds, "pixel_size_A", gt.pixel_size)?;
    ds.new_attr::<u32>()
        .create("upscale")?
        .write_scalar(&(gt.upscale as u32))?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<Option<GroundTruth>> {
    quiet();
    let file = hdf5::File::open(path)?;
    if !file.link_exists(GROUND_TRUTH) {
        return Ok(None);
    }
    let ds = file.dataset(GROUND_TRUTH)?;
    Ok(Some(GroundTruth {
        phase: dims::<Ix2>(read_real(&ds)?, "ground truth")?,
        pixel_size: read_attr(&ds, "pixel_size_A")?,
        upscale: read_attr(&ds, "upscale")? as usize,
    }))
}

/// Adds `/views` and `/view_angles_mrad` to an existing container.
pub fn save_views(path: &Path, stack: &ViewStack) -> Result<()> {
    quiet();
    let file = hdf5::File::open_rw(path)?;
    replace(&file, VIEWS)?;
    replace(&file, VIEW_ANGLES)?;
    let ds = file
        .new_dataset_builder()
        .with_data(&to_f32(&stack.views))
        .create(VIEWS)?;
    let norm: VarLenUnicode = match stack.normalization {
        Normalization::Raw => "raw",
        Normalization::PerViewMean => "per_view_mean",
    }
    .parse()
    .expect("ascii tag");
    ds.new_attr::<VarLenUnicode>()
        .create("normalization")?
        .write_scalar(&norm)?;
    ds.new_attr::<u32>()
        .create("pixels_per_view")?
        .write_scalar(&(stack.pixels_per_view as u32))?;
    let angles = Array2::from_shape_fn((stack.len(), 2), |(v, k)| {
        let a = stack.angles[v];
        (if k == 0 { a.0 } else { a.1 }) as f32
    });
    file.new_dataset_builder()
        .with_data(&angles)
        .create(VIEW_ANGLES)?;
    Ok(())
}

/// Reads the stored view stack; calibration comes from `/datacube`.
pub fn load_views(path: &Path) -> Result<Option<ViewStack>> {
    quiet();
    let file = hdf5::File::open(path)?;
    if !file.link_exists(VIEWS) {
        return Ok(None);
    }
    let calib = load_cube(path)?.calib().clone();
    let ds = file.dataset(VIEWS)?;
    let views: Array3<f64> = dims::<Ix3>(read_real(&ds)?, "views")?;
    let angles: Array2<f64> = dims::<Ix2>(read_real(&file.dataset(VIEW_ANGLES)?)?, "view angles")?;
    if angles.dim() != (views.shape()[0], 2) {
        return Err(Error::Shape(format!(
            "{} views but angles {:?}",
            views.shape()[0],
            angles.dim()
        )));
    }
    let normalization = match ds
        .attr("normalization")?
        .read_scalar::<VarLenUnicode>()?
        .as_str()
    {
        "raw" => Normalization::Raw,
        "per_view_mean" => Normalization::PerViewMean,
        other => return Err(Error::Config(format!("unknown normalization {other:?}"))),
    };
    Ok(Some(ViewStack {
        views,
        angles: angles.outer_iter().map(|r| (r[0], r[1])).collect(),
        calib,
        normalization,
        pixels_per_view: read_attr(&ds, "pixels_per_view")? as usize,
    }))
}

/// Writes a single-channel float32 TIFF; rows are the first array axis.
pub fn write_tiff(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<f32> = img.iter().map(|&v| v as f32).collect();
    let mut enc = tiff::encoder::TiffEncoder::new(fs::File::create(path)?)?;
    enc.write_image::<tiff::encoder::colortype::Gray32Float>(w as u32, h as u32, &data)?;
    Ok(())
}

pub fn read_tiff(path: &Path) -> Result<Array2<f64>> {
    use tiff::decoder::{Decoder, DecodingResult};
    let mut dec = Decoder::new(fs::File::open(path)?)?;
    let (w, h) = dec.dimensions()?;
    let data: Vec<f64> = match dec.read_image()? {
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        _ => {
            return Err(Error::Config(format!(
                "{}: unsupported sample type",
                path.display()
            )))
        }
    };
    Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|_| Error::Shape(format!("{}: not a single-channel image", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub views: ViewSettings,
    pub normalization: Normalization,
    /// Free-form training record (step, seed, config).
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// A trained model plus the view recipe it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub views: ViewSettings,
    pub provenance: serde_json::Value,
}

fn array_file(name: &str) -> String {
    format!("{name}.f32")
}

/// Writes `dir/manifest.json` and one little-endian float32 file per array.
/// The directory is assembled beside the target and swapped in, so a failed
/// write leaves the previous checkpoint intact.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut arrays = Vec::new();
    for (name, t) in ckpt.params.params.iter().chain(&ckpt.params.buffers) {
        let file = array_file(name);
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(staging.join(&file), bytes)?;
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        model: ckpt.params.config.clone(),
        views: ckpt.views,
        normalization: Normalization::PerViewMean,
        provenance: ckpt.provenance.clone(),
        arrays,
    };
    fs::write(
        staging.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&staging, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&staging, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".{tag}"));
    dir.with_file_name(name)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut arrays = BTreeMap::new();
    for e in &manifest.arrays {
        let bytes = fs::read(dir.join(&e.file))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Shape(format!(
                "{}: {} bytes for shape {:?}",
                e.file,
                bytes.len(),
                e.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        arrays.insert(e.name.clone(), Tensor::from_vec(e.shape, data));
    }
    Ok(Checkpoint {
        params: ParameterSet::from_arrays(manifest.model, arrays)?,
        views: manifest.views,
        provenance: manifest.provenance,
    })
}
