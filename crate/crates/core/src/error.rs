use thiserror::Error;

/// Errors produced by dataset handling, the numerical kernel, the tests and
/// the policy learning pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),
    #[error("non-finite value at row {row}")]
    NonFiniteValue { row: usize },
    #[error("behavior propensity out of (0,1] at row {row}")]
    PropensityOutOfRange { row: usize },
    #[error("treatment code out of range at row {row}")]
    TreatmentOutOfRange { row: usize },
    #[error("environment `{0}` has no rows")]
    EmptyEnvironment(String),
    #[error("covariate index {index} out of range for dimension {d}")]
    IndexOutOfRange { index: usize, d: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("behavior policy assigns zero probability to some treatment")]
    DegeneratePolicy,
    #[error("no closed-form CATE for this subset; use Monte Carlo")]
    UnsupportedSubset,
    #[error("design matrix is rank deficient (numerical rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("mean Jacobian is singular")]
    SingularJacobian,
    #[error("degrees of freedom must be positive")]
    InvalidDof,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("Newton iterations did not converge (last gradient norm {grad_norm:e})")]
    DidNotConverge { grad_norm: f64 },
    #[error("logistic fit diverged; classes appear separable")]
    SeparableData,
    #[error("dataset has a single environment; at least two are required")]
    SingleEnvironment,
    #[error("multi-level treatments are not supported by this test")]
    MultiLevelTreatmentUnsupported,
    #[error("behavior propensities are missing")]
    MissingPropensity,
    #[error("environment `{0}` has too few rows to fit nuisance models")]
    EnvironmentTooSmall(String),
    #[error("fitted propensity underflowed the clipping bounds")]
    PropensityUnderflow,
    #[error("default candidate enumeration refused for d = {0} > 12")]
    TooManyCandidates(usize),
    #[error("no CATE models supplied")]
    EmptyModelList,
    #[error("test sample too small: m = {m} < {required}")]
    TestSampleTooSmall { m: usize, required: usize },
    #[error("environment class is empty")]
    EmptyClass,
    #[error("class members do not share a covariate law")]
    CovariateLawMismatch,
    #[error("table is empty; nothing to write")]
    EmptyTable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
