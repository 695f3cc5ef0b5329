use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Pipeline stage an error surfaced in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Validate,
    Nuisance,
    Covariance,
    Kernel,
    Permutation,
    FTest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Validate => "validate",
            Stage::Nuisance => "nuisance fit",
            Stage::Covariance => "covariance estimation",
            Stage::Kernel => "kernel assembly",
            Stage::Permutation => "permutation test",
            Stage::FTest => "F test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("subject {subject}: duplicate observation time {time}")]
    DuplicateTime { subject: String, time: f64 },
    #[error("subject {subject}: covariate column {column} varies within subject")]
    InconsistentCovariate { subject: String, column: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("time {time} outside range [{lo}, {hi}]")]
    OutsideRange { time: f64, lo: f64, hi: f64 },
    #[error("penalized normal equations are singular")]
    Singular,
    #[error("GCV undefined: effective degrees of freedom reach the observation count {n_obs}")]
    GcvUndefined { n_obs: usize },
    #[error("smoothed covariance has no positive eigenvalues")]
    NoPositiveEigenvalues,
    #[error("covariance grid not covered by data: {0}")]
    Uncovered(String),
    #[error("subject {subject}: covariance block is not positive definite (sigma2 = {sigma2:e}); raise the sigma2 floor")]
    NotPositiveDefinite { subject: String, sigma2: f64 },
    #[error("all covariate vectors are identical; median heuristic bandwidth is zero")]
    DegenerateBandwidth,
    #[error("subject {subject}: time {time} is not on the master grid")]
    OffGrid { subject: String, time: f64 },
    #[error("alternative-model residual sum of squares is zero")]
    DegenerateF,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage { stage: Stage, source: Box<Error> },
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for problems with the input data rather than the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidData(_)
                | Error::DuplicateTime { .. }
                | Error::InconsistentCovariate { .. }
                | Error::OutsideRange { .. }
                | Error::OffGrid { .. }
                | Error::DimensionMismatch(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
