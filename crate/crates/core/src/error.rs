use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFiniteValue { op: &'static str, node: usize },

    #[error("`{op}` expects {expected} input(s), got {got}")]
    ArityMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("tangent seed must reference an input node (node {0} is not an input)")]
    SeedNotInput(usize),

    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error("collapse rates must be nonnegative (got {0})")]
    NegativeRate(f64),

    #[error("unknown gate `{0}`")]
    UnknownGate(String),

    #[error("degenerate state: un-normalized norm {norm:.3e} at t = {t}")]
    DegenerateState { t: f64, norm: f64 },

    #[error("process fidelity outside the physical range: {0}")]
    NonPhysicalFidelity(f64),

    #[error("cubic spline needs at least 3 samples, got {0}")]
    TooFewSamples(usize),

    #[error("non-finite gradient at epoch {epoch} in parameter `{param}`")]
    NonFiniteGradient { epoch: usize, param: String },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether this error stems from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteValue { .. }
                | Error::NonFiniteGradient { .. }
                | Error::DegenerateState { .. }
                | Error::NonPhysicalFidelity(_)
        )
    }
}
