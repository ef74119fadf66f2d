use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate vector (norm {norm:e} below {eps:e})")]
    Degenerate { norm: f64, eps: f64 },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("parameter {0} does not reach the output")]
    DetachedParameter(String),

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("inconsistent constants: {0}")]
    Constants(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint {expected}, config {found}")]
    HashMismatch { expected: String, found: String },

    #[error("gate failed for {model}: {detail}")]
    Gate { model: String, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
