use thiserror::Error;

/// Errors produced anywhere in the simulation, learning and control stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("gripper separation {separation:.6} m exceeds the stretched maximum {max:.6} m")]
    InfeasibleClamp { separation: f64, max: f64 },

    #[error("equilibrium solve did not converge after {iterations} iterations (gradient norm {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("stiffness matrix is not positive definite at {context}")]
    IndefiniteHessian { context: String },

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("non-unit quaternion (norm {0:.9})")]
    NonUnitQuaternion(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("non-finite online update: {0}")]
    NonFiniteUpdate(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
