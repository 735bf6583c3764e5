use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("matrix is singular")]
    SingularMatrix,

    #[error("shifted divisor matrix is singular at (n={n}, p={p}); counterterm adjustment needed")]
    SingularShiftedMatrix { n: i64, p: i64 },

    #[error("A22 block is singular in the block decomposition")]
    SingularA22,

    #[error("Schur block ~A11 is singular")]
    SingularSchurBlock,

    #[error("missing counterterm block for (n={n}, p={p}) at order {order}")]
    MissingCounterterm { n: i64, p: i64, order: usize },

    #[error("asymmetric input matrix")]
    AsymmetricInput,

    #[error("{what} did not converge within {iters} iterations")]
    NoConvergence { what: String, iters: usize },

    #[error("Melnikov condition failed at (n={n}, p={p}), margin {margin}")]
    MelnikovFailure { n: i64, p: i64, margin: f64 },

    #[error("inconsistent tree labels: {0}")]
    LabelInconsistency(String),

    #[error("scale-count bound violated: {0}")]
    BoundViolation(String),

    #[error("negative amplitude square at member {member}")]
    NegativeAmplitudeSquare { member: String },

    #[error("packet search exhausted (enlarge the base radius)")]
    SearchExhausted,

    #[error("duplicate input vector {0}")]
    DuplicateInput(String),

    #[error("block exceeds derived bound: {0}")]
    BlockBoundViolation(String),

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
