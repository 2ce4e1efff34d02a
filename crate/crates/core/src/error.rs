use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0}")]
    InvalidShape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated")]
    Truncated,
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("rank {0} exceeds 4")]
    RankTooLarge(u8),
    #[error("zero extent in tensor '{0}'")]
    ZeroExtent(String),
    #[error("tensor name of {0} bytes exceeds 255")]
    NameTooLong(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("empty tensor name")]
    EmptyName,
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("neuron selection: {0}")]
    Selection(String),
    #[error("no candidate channel for cell ({y}, {x})")]
    NoCandidate { y: usize, x: usize },
    #[error("selection does not match model: {0}")]
    SelectionMismatch(String),

    #[error("substituted pixel count is zero")]
    ZeroPixelCount,
    #[error("both classes are required: {0}")]
    SingleClass(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("ground-truth mask is empty")]
    EmptyTruth,

    #[error("region sampling failed after {0} attempts")]
    RegionSampling(usize),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
