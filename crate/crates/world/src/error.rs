use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("episode rejected: {0}")]
    Rejected(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Sidecar { path: String, msg: String },
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] slotforge_core::Error),
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;
