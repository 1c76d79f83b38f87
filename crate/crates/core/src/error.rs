use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid descriptor {path}: {message}")]
    Descriptor { path: PathBuf, message: String },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("voxel count mismatch: descriptor declares {declared} samples, file holds {actual}")]
    VoxelCountMismatch { declared: usize, actual: usize },

    #[error("degenerate dimensions {nx}x{ny}x{nz}")]
    DegenerateDimensions { nx: usize, ny: usize, nz: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("no foreground pixels")]
    NoForeground,

    #[error("radius below resolution: {radius_um} um at {spacing_um} um spacing")]
    RadiusBelowResolution { radius_um: f64, spacing_um: f64 },

    #[error("objective returned a non-finite value")]
    NonFiniteObjective,

    #[error("zero tissue volume")]
    EmptyTissue,

    #[error("particle {id} is missing its {axis} label")]
    UnsetAxis { id: u32, axis: &'static str },

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
