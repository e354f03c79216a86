use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no supervised frames")]
    NoSupervisedFrames,
    #[error("missing supervision: {0} label required in multi-task mode")]
    MissingSupervision(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("target {target} FA/hr outside achievable range [{min}, {max}]")]
    FaOutOfRange { target: f64, min: f64, max: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed phoneme span: {0}")]
    MalformedSpan(String),
    #[error("enrollment needs {expected} utterances, got {got}")]
    EnrollmentSize { expected: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;
