use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected 2^{level} cell values, got {got}")]
    CellCount { level: u32, got: usize },
    #[error("family is empty")]
    EmptyFamily,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("target {target} not reached for M <= {m_max}; best value {achieved} at M = {best_m}")]
    TargetNotReached {
        target: f64,
        m_max: u32,
        achieved: f64,
        best_m: u32,
    },
    #[error("denominator vanishes")]
    ZeroDenominator,
    #[error("weight not strictly positive: min value {min} at level {level}")]
    NotPositive { level: usize, min: f64 },
    #[error("schedule search hit k_cap = {k_cap} at step {step}; failing check: {check}")]
    ScheduleCap {
        k_cap: u32,
        step: usize,
        check: String,
    },
    #[error("point ({0}, {1}) lies on a rectangle edge")]
    OnEdge(f64, f64),
    #[error("doubling ratio {ratio} too large for tail convergence (limit {limit})")]
    TailDiverges { ratio: f64, limit: f64 },
    #[error("materialization of 2^{0} cells exceeds the memory guard")]
    TooLarge(u32),
    #[error("stage {stage} aborted: {reason}")]
    Stage { stage: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
