use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("need at least 7 years per individual, got {0}")]
    TooFewYears(usize),

    #[error("regression has {rows} rows; at least 7 are needed to identify 6 coefficients and a variance")]
    TooFewRows { rows: usize },

    #[error("rank-deficient design; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("year {year} is outside the code table")]
    YearOutOfRange { year: i32 },

    #[error("person {person}: gap at year {year} is not a single year flanked by observed values")]
    GapTooLong { person: u64, year: i32 },

    #[error("person {person}: no imputation donor within ±{neighborhood} of change {change} (year {year})")]
    NoDonor {
        person: u64,
        year: i32,
        change: f64,
        neighborhood: f64,
    },

    #[error("person {person}: missing value at year {year}; impute before sampling")]
    MissingValue { person: u64, year: i32 },

    #[error("Kalman filter covariance is not finite at year {year}")]
    FilterDivergence { year: i32 },

    #[error("volatility state invariant violated: {0}")]
    InvariantViolation(String),

    #[error("person {person}, year {year}: {source}")]
    At {
        person: u64,
        year: i32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at(self, person: u64, year: i32) -> Self {
        match self {
            e @ Error::At { .. } => e,
            e => Error::At {
                person,
                year,
                source: Box::new(e),
            },
        }
    }
}
