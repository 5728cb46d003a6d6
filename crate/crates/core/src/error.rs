use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("nonpositive value {value} for site {site_id} on {date}")]
    NonPositiveValue {
        site_id: String,
        date: String,
        value: f64,
    },

    #[error("coordinates ({lon}, {lat}) fall outside the domain bounding box")]
    OutOfDomain { lon: f64, lat: f64 },

    #[error("degenerate month {month}: {stations} stations but at least {required} needed")]
    DegenerateMonth {
        month: String,
        stations: usize,
        required: usize,
    },

    #[error("duplicate knot at ({0}, {1})")]
    DuplicateKnot(f64, f64),

    #[error("rank-deficient design: collinear terms {0:?}")]
    RankDeficient(Vec<String>),

    #[error("over-parameterized fit: trace of influence matrix {trace:.4} >= n = {n}")]
    OverParameterized { trace: f64, n: usize },

    #[error("unknown term '{0}'")]
    UnknownTerm(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("backfitting did not converge in {iterations} iterations (last change {last_change:.3e}, previous {previous_change:.3e})")]
    NotConverged {
        iterations: usize,
        last_change: f64,
        previous_change: f64,
    },

    #[error("missing covariate '{name}' for {ids:?}")]
    MissingCovariate { name: String, ids: Vec<String> },

    #[error("month {0} is outside the fitted range")]
    MonthOutOfRange(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("no usable data: {0}")]
    NoData(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
