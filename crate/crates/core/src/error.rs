use thiserror::Error;

use crate::rl_agent::QNetwork;

pub type Result<T, E = CtsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CtsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    /// A plan asked a warehouse for more of a product than it holds.
    #[error(
        "feasibility violation: product {product} at warehouse {warehouse} \
         requested {requested}, available {available}"
    )]
    Infeasible {
        product: usize,
        warehouse: usize,
        requested: u64,
        available: u32,
    },

    #[error("instance too large for enumeration: {lines} lines over {warehouses} warehouses")]
    TooLarge { lines: usize, warehouses: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// Training produced a non-finite loss. Carries the last network whose
    /// parameters were all finite.
    #[error("training diverged at episode {episode}")]
    Diverged {
        episode: usize,
        last_good: Box<QNetwork>,
    },

    #[error("policy {policy} failed at step {step}: {source}")]
    Policy {
        policy: String,
        step: usize,
        #[source]
        source: Box<CtsError>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
