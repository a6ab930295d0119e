use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding dimension {dim} too small: need at least {required} (K_S + K_A + 3)")]
    DimensionTooSmall { dim: usize, required: usize },

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is rank deficient or not positive definite")]
    RankDeficient,

    #[error("parameter constraint violated: {0}")]
    Constraint(String),

    #[error("value-table solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty conflict test set")]
    EmptyTestset,

    #[error("insufficient {what}: need {needed}, have {available}")]
    InsufficientTokens {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("subject {subject} is paired with more than one answer or the pair repeats (answer {answer})")]
    Uniqueness { subject: usize, answer: usize },

    #[error("category verification failed for {category} example (subject {subject}): {reason}")]
    CategoryVerification {
        category: &'static str,
        subject: usize,
        reason: String,
    },

    #[error("conflict context {context} also appears as a training answer")]
    ConflictLeak { context: usize },

    #[error("invalid token {token} for {role}")]
    InvalidToken { token: usize, role: &'static str },

    #[error("invalid training spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
