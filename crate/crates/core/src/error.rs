use thiserror::Error;

/// Errors raised by the engine and its gradient machinery.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("articulated inertia pivot for joint {joint} is not invertible")]
    SingularMass { joint: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no candidate classification satisfies the LCP conditions")]
    Infeasible,

    #[error("LCP pivoting did not terminate within {pivots} pivots")]
    NoConvergence { pivots: usize },

    #[error("classification no longer describes a valid LCP solution: {0}")]
    StaleClassification(String),

    #[error("tied LCP rows {rows:?} need a subgradient policy")]
    TiedPresent { rows: Vec<usize> },

    #[error("contact {contact} lies within {margin:e} of a contact-kind boundary")]
    KindBoundary { contact: usize, margin: f64 },

    #[error("bouncing contact row {row} has a zero Jacobian")]
    DegenerateBounceRows { row: usize },

    #[error("function returned a non-finite value")]
    NonFinite,

    #[error("shape mismatch in block `{block}`: {detail}")]
    ShapeMismatch { block: String, detail: String },

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse { line: usize, column: usize, reason: String },

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
