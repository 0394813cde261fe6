use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input violates a documented invariant (map specs, configs, flags).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Token stream does not follow the episode grammar.
    #[error("parse error at token {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Rejection sampling gave up.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file on disk does not match the expected binary/text layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    /// The CLI maps these to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_) | Error::Validation(_) | Error::Contract(_) | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
