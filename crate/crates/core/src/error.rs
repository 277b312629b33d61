use thiserror::Error;

use crate::sim::LedgerRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("conductivity at node {node} has eigenvalue {value} outside ellipticity bounds [{lower}, {upper}]")]
    Ellipticity {
        node: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("bidomain composition is singular beyond the constant kernel: {0}")]
    SingularComposition(String),

    #[error("degenerate spectrum: every eigenvalue is zero")]
    DegenerateSpectrum,

    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("noise coefficient gamma_{mode} = {value} is negative")]
    NegativeCoefficient { mode: usize, value: f64 },

    #[error("noise weight on mode {mode} whose eigenvalue {eigenvalue} is not positive")]
    ZeroEigenvalueNoise { mode: usize, eigenvalue: f64 },

    #[error("growth condition violated: {0}")]
    GrowthViolation(String),

    #[error("explicit scheme unstable: dt * lambda_max = {0} >= 2")]
    ExplicitUnstable(f64),

    #[error("solution blew up at t = {t}")]
    BlowUp {
        t: f64,
        last_finite: Option<Box<LedgerRow>>,
    },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
