use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A time or noise level outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed dataset file. `offset` is the byte (binary) or line (CSV)
    /// position where parsing failed.
    #[error("format error at {unit} {offset}: {msg}")]
    Format {
        unit: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// The proposal assigns zero mass to an atom the posterior supports, so
    /// the importance-sampling variance is infinite.
    #[error("unsupported proposal: q = 0 at atom {index} where the posterior is positive")]
    UnsupportedProposal { index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn format_at(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            unit: "byte",
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn format_line(line: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            unit: "line",
            offset: line,
            msg: msg.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips [`Error::Context`] layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad user input rather than bad data or IO.
    pub fn is_usage(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::Argument(_))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
