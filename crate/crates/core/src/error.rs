use thiserror::Error;

/// Errors produced by the kriging engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("locations {0} and {1} coincide; the covariance matrix would be singular")]
    DuplicateLocation(usize, usize),

    #[error("matrix is not positive definite: {0}")]
    SingularMatrix(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("convex hull is degenerate: all locations are collinear")]
    DegenerateHull,

    #[error("cannot eliminate constraints: leading {p}x{p} block of the design matrix is singular (condition number {condition:.3e}); permute rows")]
    ConstraintElimination { p: usize, condition: f64 },

    #[error("objective increased for {0} consecutive iterations; use a smaller step size")]
    StepSize(usize),

    #[error("candidate set has no redundancy (independent data); eta selection is meaningless")]
    DegenerateRedundancy,

    #[error("reference variances coincide (sigma2_inf = {high}, sigma2_gk = {low}); all solutions are equivalent")]
    DegenerateVariance { low: f64, high: f64 },

    #[error("no location pairs fall within the maximum lag {0}")]
    EmptyVariogram(f64),

    #[error("variogram fit did not converge on any start (best objective {:.6e})", .0.objective)]
    FitFailed(Box<crate::variogram::VariogramFit>),

    #[error("negative prediction variance {0:.3e}")]
    NegativeVariance(f64),

    #[error("empty result: {0}")]
    Empty(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix(_)
                | Error::RankDeficient(_)
                | Error::ConstraintElimination { .. }
                | Error::StepSize(_)
                | Error::DegenerateRedundancy
                | Error::DegenerateVariance { .. }
                | Error::FitFailed(_)
                | Error::NegativeVariance(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
