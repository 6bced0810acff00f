use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmmError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GmmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} is rank deficient (condition number {condition:.3e})")]
    RankDeficient { what: String, condition: f64 },

    #[error("weight matrix is not positive definite (condition number {condition:.3e})")]
    SingularWeight { condition: f64 },

    #[error("normal matrix G'W^-1 G is singular (condition number {condition:.3e})")]
    SingularNormalMatrix { condition: f64 },

    #[error("correction matrix I - D is ill-conditioned (condition number {condition:.3e})")]
    IllConditionedCorrection { condition: f64 },

    #[error("index {index} out of range for dimension {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("panel needs at least {min} periods, got {periods}")]
    PanelTooShort { periods: usize, min: usize },

    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),

    #[error("J statistic is not defined for a just-identified model")]
    JNotDefined,

    #[error("standard error of coefficient {coef} is zero")]
    DegenerateStandardError { coef: usize },

    #[error("{0} standard errors are not available for this estimator")]
    SeUnavailable(&'static str),

    #[error("bootstrap needs at least {min} resampling units, got {units}")]
    TooFewUnits { units: usize, min: usize },

    #[error("every bootstrap resample was degenerate")]
    AllResamplesDegenerate,

    #[error("every Monte Carlo replication failed")]
    AllReplicationsFailed,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl GmmError {
    /// True for failures of the numerical linear algebra, as opposed to bad
    /// shapes or arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GmmError::RankDeficient { .. }
                | GmmError::SingularWeight { .. }
                | GmmError::SingularNormalMatrix { .. }
                | GmmError::IllConditionedCorrection { .. }
                | GmmError::DegenerateStandardError { .. }
                | GmmError::AllResamplesDegenerate
                | GmmError::AllReplicationsFailed
        )
    }
}
