use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask row {row} has no attendable position")]
    Mask { row: usize },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{got} concepts exceeds the configured maximum of {max}")]
    TooManyConcepts { got: usize, max: usize },
    #[error("backend failure in {stage}{}: {message}", index.map(|i| alloc::format!(" (concept {i})")).unwrap_or_default())]
    Backend {
        stage: String,
        index: Option<usize>,
        message: String,
    },
    #[error("non-finite loss {0}; step aborted")]
    NonFiniteLoss(f64),
    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },
    #[error("dataset `{0}` is empty but has positive weight")]
    EmptyDataset(String),
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("records and ground truth are not aligned: {0}")]
    Alignment(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training step {step}: {source}")]
    AtStep {
        step: usize,
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn backend(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            stage: stage.into(),
            index: None,
            message: message.into(),
        }
    }

    /// Attach a concept index to a backend error; other variants pass through.
    pub fn with_concept(self, idx: usize) -> Self {
        match self {
            Error::Backend { stage, message, .. } => Error::Backend {
                stage,
                index: Some(idx),
                message,
            },
            other => other,
        }
    }

    /// Re-label the stage of a backend error.
    pub fn at_stage(self, name: &str) -> Self {
        match self {
            Error::Backend { index, message, .. } => Error::Backend {
                stage: name.into(),
                index,
                message,
            },
            other => other,
        }
    }
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(alloc::format!(
            "{what}: {}x{} vs {}x{}",
            a.0,
            a.1,
            b.0,
            b.1
        )));
    }
    Ok(())
}

pub(crate) fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
