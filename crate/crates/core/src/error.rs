use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for size {size} ({context})")]
    Index {
        index: usize,
        size: usize,
        context: &'static str,
    },

    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A fixed-length position table was asked for more rows than it has.
    #[error("sequence length {required} exceeds position table length {available}")]
    LengthExceeded { required: usize, available: usize },

    #[error("operation `{op}` is not supported for the {scheme} encoding")]
    UnsupportedScheme { op: &'static str, scheme: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: need {required} tokens, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e}, last finite loss {last_finite_loss:?})")]
    NonFinite {
        step: usize,
        lr: f64,
        grad_norm: f64,
        last_finite_loss: Option<f64>,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("report merge failed: {0}")]
    Merge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Joins a dotted key path, treating an empty prefix as the root.
pub fn key_path(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
