use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("convolution kernel extent {0} is even")]
    EvenKernel(usize),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("extent {extent} is not divisible by patch size {patch}")]
    IndivisibleExtent { extent: usize, patch: usize },
    #[error("timestep mismatch: audio has {audio}, visual has {visual}")]
    TimestepMismatch { audio: usize, visual: usize },
    #[error("cannot normalize a zero row (row {0})")]
    Normalization(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {0}")]
    DivergenceDetected(usize),
    #[error("gradient check failed: max relative error {0:e}")]
    GradientCheckFailed(f64),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
