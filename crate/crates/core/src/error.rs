use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("end blocks must hold exactly one spin (first = {first}, last = {last})")]
    EndBlockNotSingleton { first: usize, last: usize },

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },

    #[error("non-finite parameter: {0}")]
    NonFiniteParameter(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("size cap exceeded: {what} = {value} > {cap}")]
    CapExceeded { what: &'static str, value: usize, cap: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("propagator failed to converge: {0}")]
    ConvergenceFailure(String),

    #[error("time series does not determine the spectrum: {0}")]
    RankDeficient(String),

    #[error("spectral weights are not positive: {0}")]
    NonPositiveWeights(String),

    #[error("spectrum has (near-)degenerate eigenvalues: {0}")]
    DegenerateSpectrum(String),

    #[error("Lanczos breakdown at step {step} (beta = {beta:e})")]
    Breakdown { step: usize, beta: f64 },

    #[error("polynomial fit ill-conditioned: {0}")]
    FitIllConditioned(String),

    #[error("every candidate exceeds the measured value {0}")]
    EmptySelection(f64),

    #[error("no difference from the reference model above the noise floor")]
    NoSignal,

    #[error("no block hypothesis is consistent with the measured coefficients: {0}")]
    NoConsistentSolution(String),

    #[error("structure is ambiguous: {0}")]
    AmbiguousStructure(String),

    #[error("block {0} holds a single spin")]
    NotABlock(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operation not available in {0} mode")]
    ModeUnsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
