use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("singular degree matrix: diagonal entry {index} is {value}")]
    SingularDegree { index: usize, value: f64 },
    #[error("degenerate eigenproblem: no eigenvalue above {threshold}")]
    Degenerate { threshold: f64 },
    #[error("matrix too large for dense eigensolver: n = {n}, cap = {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("unstable state matrix: A[{index}] = {value} must be strictly negative")]
    Unstable { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid period {0}: must be >= 1")]
    InvalidPeriod(usize),
    #[error("not a permutation matrix: {0}")]
    NotPermutation(String),
    #[error("odd embedding dimension {0}")]
    OddDimension(usize),
    #[error("decoder stack has no blocks")]
    EmptyStack,
    #[error("{what} = {value} out of range {lo}..={hi}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },
    #[error("channel {0} is constant and cannot be normalized")]
    ConstantChannel(String),
    #[error("series too short: {rows} rows, window length {length}")]
    TooShort { rows: usize, length: usize },
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NanLoss { step: usize, diagnostic: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::OddDimension(_)
            | Error::InvalidPeriod(_)
            | Error::EmptyStack => 1,
            Error::NonFinite(_)
            | Error::NanLoss { .. }
            | Error::Degenerate { .. }
            | Error::SingularDegree { .. }
            | Error::Unstable { .. }
            | Error::TooLarge { .. } => 3,
            _ => 2,
        }
    }
}
