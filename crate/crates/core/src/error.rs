use thiserror::Error;

/// Failures raised while building or differentiating a computation graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tangent channel is not enabled on this graph")]
    TangentInactive,
    #[error("tangent seeds are only allowed on leaves (node {0})")]
    SeedOnNonLeaf(usize),
    #[error("parameter name `{0}` registered twice")]
    DuplicateParam(String),
}

/// Crate-level error for model, risk, training and dataset operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("unbiased MMD needs at least two samples per set (got {n} and {m})")]
    TooFewSamples { n: usize, m: usize },
    #[error("analytic lambda undefined: expected |grad| is zero")]
    ZeroDenominator,
    #[error("analytic lambda undefined: max risk {max} below expected risk {expected}")]
    NegativeGap { max: f64, expected: f64 },
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },
    #[error("training diverged at step {step}: total risk {value}")]
    Diverged { step: usize, value: f64 },
    #[error("world exhausted: {0}")]
    WorldExhausted(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
