use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last max change {max_change:.3e})")]
    NotConverged { sweeps: usize, max_change: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("moment {index} is degenerate (second moment {value:.3e} below floor)")]
    DegenerateMoment { index: usize, value: f64 },

    #[error("share Jacobian is singular in market {market} (condition number {condition:.3e})")]
    SingularShareJacobian { market: usize, condition: f64 },

    #[error("invalid shares: {0}")]
    InvalidShares(String),

    #[error("degenerate bandwidth: all points coincide")]
    DegenerateBandwidth,

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing fit for fold pair ({0}, {1})")]
    MissingPairFit(usize, usize),

    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical kind (as opposed to usage errors).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotConverged { .. }
            | Error::Singular(_)
            | Error::DegenerateMoment { .. }
            | Error::SingularShareJacobian { .. }
            | Error::DegenerateBandwidth
            | Error::AllReplicationsFailed(_) => true,
            Error::Fold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
