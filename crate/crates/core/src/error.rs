use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("negative price {0} (prices live on [0, inf))")]
    NegativePrice(f64),

    #[error("invalid time interval: {from} > {to}")]
    TimeOrder { from: f64, to: f64 },

    #[error("time {t} outside horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },

    #[error("control {0} outside the admissible set")]
    ControlOutOfRange(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("query point {point:?} below the minimum of axis `{axis}`")]
    BelowAxis { axis: String, point: Vec<f64> },

    #[error("query point {point:?} above the maximum of axis `{axis}`")]
    AboveAxis { axis: String, point: Vec<f64> },

    #[error("inflow has {0} disjoint excess intervals; only a single interval is supported")]
    MultipleExcessIntervals(usize),

    #[error(
        "no admissible control at node {node:?} (t = {t}); controllability assumption violated?"
    )]
    EmptyControlSet { t: f64, node: Vec<f64> },

    #[error("controllability assumption fails (margin {eta_max}); use the level-set path")]
    ControllabilityFails { eta_max: f64 },

    #[error("memory estimate {required_mib} MiB exceeds the budget of {budget_mib} MiB: {report}")]
    MemoryBudget {
        required_mib: u64,
        budget_mib: u64,
        report: String,
    },

    #[error("feedback queried at an infeasible node (t = {t}, x = {x}, y = {y:?})")]
    InfeasibleNode { t: f64, x: f64, y: Vec<f64> },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
