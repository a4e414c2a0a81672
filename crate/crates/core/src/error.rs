use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty datacube")]
    EmptyDatacube,
    #[error("center out of range: shift ({dx:.3}, {dy:.3}) px exceeds half the detector")]
    CenterOutOfRange { dx: f64, dy: f64 },
    #[error("degenerate affine: determinant {0:e}")]
    DegenerateAffine(f64),
    #[error(
        "undersampled probe: aperture cutoff {cutoff:.4} 1/A exceeds Nyquist {nyquist:.4} 1/A"
    )]
    UndersampledProbe { cutoff: f64, nyquist: f64 },
    #[error("packing failed: placed {placed} of {requested} atoms with min spacing {spacing} A")]
    PackingFailed {
        placed: usize,
        requested: usize,
        spacing: f64,
    },
    #[error("expected unit-flux cube: pattern at ({rx}, {ry}) sums to {total}")]
    NotUnitFlux { rx: usize, ry: usize, total: f64 },
    #[error("no bright-field pixels")]
    NoBrightField,
    #[error("binning eliminates all views (bin = {0})")]
    BinningEliminatesViews(usize),
    #[error("dead view: view {0} has non-positive mean")]
    DeadView(usize),
    #[error("perceptual extractor not configured")]
    ExtractorMissing,
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("view count mismatch: checkpoint expects {expected} views, extraction produced {found}; re-extract with radius_fraction = {radius_fraction} and bin = {bin}")]
    ViewMismatch {
        expected: usize,
        found: usize,
        radius_fraction: f64,
        bin: usize,
    },
    #[error(transparent)]
    Tensor(#[from] misr4d_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),
    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),
}

impl Error {
    /// Process exit code for the command-line tool: 3 for numerical failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
