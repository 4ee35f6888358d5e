use thiserror::Error;

/// Errors produced by the planning, estimation, control and FEM layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate timing: {0}")]
    DegenerateTiming(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("timestamp {stamp} is not after the previous stamp {previous}")]
    OutOfOrder { stamp: f64, previous: f64 },

    #[error("smoother has no estimate yet")]
    NotInitialized,

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("no consensus: best hypothesis has only {inliers} inliers")]
    NoConsensus { inliers: usize },

    #[error("degenerate attitude: {0}")]
    DegenerateAttitude(String),

    #[error("simulation diverged at t = {t:.6} s")]
    Diverged { t: f64 },

    #[error("singular stiffness matrix, null direction dominated by dof {dof}")]
    SingularHessian { dof: usize },

    #[error("equilibrium solve did not converge after {iterations} iterations, residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("no grasp event in trace")]
    NoGraspEvent,
}

impl Error {
    /// True for numerical failures as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NoConsensus { .. }
                | Error::DegenerateAttitude(_)
                | Error::Diverged { .. }
                | Error::SingularHessian { .. }
                | Error::NotConverged { .. }
        )
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
