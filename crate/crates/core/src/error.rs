use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("design support has {count} assignments, exceeding the limit of {max}")]
    SupportTooLarge { count: u128, max: usize },

    #[error("arm {arm} of unit {unit} is outside 1..={k}")]
    ArmOutOfRange { unit: usize, arm: usize, k: usize },

    #[error("design distribution has empty support")]
    EmptySupport,

    #[error("assignment probability is zero at slot {slot}")]
    ZeroPi { slot: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("covariate column {column} is not centered (sum {sum})")]
    UncenteredByArm { column: usize, sum: f64 },

    #[error("normal matrix is singular{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    SingularNormalMatrix { context: Option<String> },

    #[error("bounding matrix is nonzero at unidentified cell ({row}, {col})")]
    NonEstimableCell { row: usize, col: usize },

    #[error("degenerate degrees of freedom: {0}")]
    DegenerateDoF(String),

    #[error("tensor path requires kn <= {max}, got {kn}")]
    TensorTooLarge { kn: usize, max: usize },

    #[error("dense matrix path requires kn <= {max}, got {kn}")]
    MatrixTooLarge { kn: usize, max: usize },

    #[error("matrix decomposition failed: {0}")]
    SvdFailure(String),

    #[error("estimator spec: {0}")]
    InvalidEstimator(String),

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("structure error: {0}")]
    StructureError(String),

    #[error("column {0} has no observed values")]
    AllMissing(String),

    #[error("value {value} at row {row} lies outside the scale [{min}, {max}]")]
    OutOfScale {
        row: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDesign(_) => "InvalidDesign",
            Error::SupportTooLarge { .. } => "SupportTooLarge",
            Error::ArmOutOfRange { .. } => "ArmOutOfRange",
            Error::EmptySupport => "EmptySupport",
            Error::ZeroPi { .. } => "ZeroPi",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::UncenteredByArm { .. } => "UncenteredByArm",
            Error::SingularNormalMatrix { .. } => "SingularNormalMatrix",
            Error::NonEstimableCell { .. } => "NonEstimableCell",
            Error::DegenerateDoF(_) => "DegenerateDoF",
            Error::TensorTooLarge { .. } => "TensorTooLarge",
            Error::MatrixTooLarge { .. } => "MatrixTooLarge",
            Error::SvdFailure(_) => "SvdFailure",
            Error::InvalidEstimator(_) => "InvalidEstimator",
            Error::SchemaError(_) => "SchemaError",
            Error::StructureError(_) => "StructureError",
            Error::AllMissing(_) => "AllMissing",
            Error::OutOfScale { .. } => "OutOfScale",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn singular(context: impl Into<String>) -> Self {
        Error::SingularNormalMatrix {
            context: Some(context.into()),
        }
    }
}
