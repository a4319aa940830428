use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgmmError {
    #[error("non-finite covariate at row {row}")]
    NonFiniteCovariate { row: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate covariance")]
    DegenerateCovariance,

    #[error("degenerate observed block")]
    DegenerateObservedBlock,

    #[error("degenerate component {component} at row {row}")]
    DegenerateComponent { component: usize, row: usize },

    #[error("component {component} collapsed (responsibility mass {mass:e})")]
    ComponentCollapse { component: usize, mass: f64 },

    #[error("fit failed: all starts degenerate")]
    AllStartsDegenerate,

    #[error("no root in {iterations} iterations (residual norm {residual:e})")]
    NoRoot { iterations: usize, residual: f64 },

    #[error("jackknife replicate for group {group} failed: {source}")]
    JackknifeReplicate {
        group: usize,
        #[source]
        source: Box<CgmmError>,
    },

    #[error("metrics undefined: no missing entries")]
    MetricsUndefined,

    #[error("too many failed replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error at {location}: {message}")]
    Csv { location: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CgmmError {
    /// True for errors caused by bad input data or files rather than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            CgmmError::InvalidData(_)
                | CgmmError::NonFiniteCovariate { .. }
                | CgmmError::DimensionMismatch(_)
                | CgmmError::Io(_)
                | CgmmError::Csv { .. }
                | CgmmError::Json(_)
                | CgmmError::MetricsUndefined
        )
    }
}

pub type Result<T, E = CgmmError> = std::result::Result<T, E>;
