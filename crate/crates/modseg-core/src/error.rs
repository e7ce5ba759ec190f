use thiserror::Error;

/// Errors surfaced by the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands whose shapes or lengths do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Inputs that are structurally valid but numerically meaningless
    /// (all-zero distributions, empty fusion sets, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Invalid configuration (bad exponents, unknown keys, inconsistent flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems ingesting external volumes (missing files, shape disagreement).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Phantom generation that cannot satisfy its spec.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training aborted because a loss component became non-finite.
    #[error("non-finite {component} loss at step {step}: {value}")]
    NonFiniteLoss {
        component: &'static str,
        step: usize,
        value: f64,
    },

    /// Malformed or incompatible checkpoint archive.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether this is a user-input/validation problem (as opposed to a
    /// runtime failure). The CLI maps validation errors to exit code 1 and
    /// runtime failures to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::DegenerateInput(_)
                | Error::Config(_)
                | Error::Ingestion(_)
                | Error::Generation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
