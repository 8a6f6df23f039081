use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetcError {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AdError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {what} at coordinate {coord}")]
    NonFinite { what: &'static str, coord: usize },
    #[error("integration diverged after t = {t_last}")]
    Divergence { t_last: f64 },
    #[error("event already active at t = {t0} (h = {h})")]
    EventActive { t0: f64, h: f64 },
    #[error("tangential event crossing at t = {t}: |dh/dt| = {hdot:e}")]
    Tangential { t: f64, hdot: f64 },
    #[error("Zeno behaviour: more than {limit} triggers before t = {t}")]
    Zeno { limit: usize, t: f64 },
    #[error("simulation stopped at t = {}: {source}", partial.times.last().copied().unwrap_or(0.0))]
    Simulation { source: Box<NetcError>, partial: Box<crate::etcsim::EtcTrace> },
    #[error("unsupported actuator: {0}")]
    UnsupportedActuator(String),
    #[error("dimension {dim} exceeds the supported maximum {max}")]
    TooLarge { dim: usize, max: usize },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = NetcError> = std::result::Result<T, E>;
