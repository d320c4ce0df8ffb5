//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error type. Variants are grouped by the layer that raises them:
/// data ingestion, linear algebra, design construction, estimation, inference,
/// and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// A column demanded by the schema is absent from the CSV header.
    #[error("missing column: {0}")]
    MissingColumn(String),
    /// A cell that should hold a finite real failed to parse.
    #[error("non-numeric cell at data row {row}, column {col}")]
    NonNumericCell { row: usize, col: String },
    /// Treatment values must be literally 0 or 1.
    #[error("treatment value outside {{0,1}} at data row {0}")]
    NonBinaryTreatment(usize),
    /// Regressor matrix has collinear columns (rank below column count at the
    /// relative singular-value threshold).
    #[error("rank-deficient regressor matrix (collinear columns)")]
    RankDeficient,
    /// No rows to work with.
    #[error("empty input")]
    EmptyInput,
    /// A stratum holds fewer units than one group needs.
    #[error("stratum {0} has fewer units than the group size")]
    StratumTooSmall(String),
    /// Group-level operations need at least two groups.
    #[error("need at least two groups")]
    SingleGroup,
    /// Both treatment arms must be nonempty.
    #[error("a treatment arm is empty")]
    EmptyArm,
    /// Wald ratio denominator too close to zero.
    #[error("first-stage effect too close to zero for a Wald ratio")]
    WeakFirstStage,
    /// A unit has no usable assignment probability.
    #[error("degenerate propensity: {0}")]
    DegeneratePropensity(String),
    /// Variance estimation was handed no pairing, or a pairing built on a
    /// different design.
    #[error("group pairing missing or inconsistent with the design")]
    MissingPairing,
    /// A paired-group union has fewer than two treated or two control units,
    /// so the within-union cross products are undefined.
    #[error("paired-group union with treated or control count below two")]
    DegenerateUnion,
    /// HC2 variance is only defined for estimators with a defining regression.
    #[error("estimator {0} has no defining regression")]
    NotRegressionBased(String),
    /// Simulation model id outside the registry.
    #[error("unknown simulation model id {0}")]
    UnknownModel(u32),
    /// Propensity must be a/k with 1 <= a < k and gcd(a, k) = 1.
    #[error("invalid propensity: {0}")]
    InvalidPropensity(String),
    /// Groups do not line up with the data they are applied to.
    #[error("bad group structure: {0}")]
    GroupStructure(String),
    /// Too many Monte Carlo replications failed.
    #[error("failure budget exceeded: {failed} of {reps} replications failed")]
    FailureBudget { failed: usize, reps: usize },
    /// Catch-all for malformed arguments that no dedicated variant names.
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
