use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (wrong dimension,
    /// non-finite input, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Integration produced a non-finite state.
    #[error("integration blow-up at state {state:?}")]
    IntegrationBlowup { state: Vec<f64> },

    /// An action reached or exceeded the barrier bound.
    #[error("action {value} outside the open barrier interval (-{bound}, {bound})")]
    BarrierViolated { value: f64, bound: f64 },

    /// Requested configuration is invalid (bad activation, bad bounds, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The fitting loop produced a non-finite loss.
    #[error("fit diverged in member {member} at minibatch {minibatch}")]
    FitDiverged { member: usize, minibatch: usize },

    /// Training aborted (too many invalid targets or a diverged fit).
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },

    /// Grid value iteration hit the sweep limit before reaching tolerance.
    #[error("value iteration did not converge: residual {residual} after {sweeps} sweeps")]
    NonConvergence { residual: f64, sweeps: usize },

    /// Checkpoint file does not match the expected version or architecture.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
