use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should react: `Io` is environmental,
/// `Parse`/`Format`/`Incompatible`/`Config`/`PhaseOrder`/`ShapeMismatch` mean
/// the inputs cannot be used together, and the numeric variants mean a
/// computation left the representable/meaningful range.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error{}: {source}", path_note(.path))]
    Io {
        #[source]
        source: std::io::Error,
        path: Option<PathBuf>,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phase ordering violated: {0}")]
    PhaseOrder(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("degenerate latent vector (zero norm){}", index_note(.index))]
    DegenerateVector { index: Option<usize> },

    #[error("kernel system ill-conditioned (pivot {pivot:.3e} at row {row})")]
    IllConditioned { row: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

fn path_note(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

fn index_note(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at row {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(source: std::io::Error, path: impl Into<PathBuf>) -> Self {
        Error::Io {
            source,
            path: Some(path.into()),
        }
    }

    /// Wraps an error with a human-readable location such as
    /// "epoch 3 step 41"; the exit-code class of the inner error is kept.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code class: 3 environment, 4 compatibility, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::Incompatible(_)
            | Error::Config(_)
            | Error::PhaseOrder(_)
            | Error::ShapeMismatch { .. } => 4,
            Error::DegenerateVector { .. }
            | Error::IllConditioned { .. }
            | Error::NonFinite(_) => 5,
            Error::Context { source, .. } => source.exit_code(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { source, path: None }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
