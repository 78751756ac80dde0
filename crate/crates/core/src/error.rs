use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape mismatch: {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite voxel in {what} at {index:?}")]
    NonFiniteVoxel { what: String, index: [usize; 3] },

    #[error("annotation for subject {0} is not binary")]
    NonBinaryAnnotation(String),

    #[error("unknown cohort for subject id {0:?}")]
    UnknownCohort(String),

    #[error("degenerate volume: zero intensity variance")]
    DegenerateVolume,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("subject {0} has no annotated lesions")]
    NoLesions(String),

    #[error("no annotated lesions in the dataset")]
    NoLesionsInDataset,

    #[error("brain mask is empty: no foreground found")]
    EmptyMask,

    #[error("could not place {what} after {attempts} attempts")]
    PlacementFailure { what: String, attempts: usize },

    #[error("backend failure at epoch {epoch}, batch {batch}: {message}")]
    BackendFailure {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("missing model artifact: {}", .0.display())]
    MissingModel(PathBuf),

    #[error("missing annotation for subject {0}")]
    MissingAnnotation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("[{stage}] {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    /// Wraps the error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T, E: Into<Error>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}
