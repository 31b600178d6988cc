//! Model assembly, training, autoregressive inference and parameter
//! accounting.

mod data;
mod infer;
mod model;
mod report;
mod train;

pub use data::{BankSource, Dataset, Sample, SpanShuffle};
pub use infer::{evaluate_forecasts, metrics, persistence_metrics, Metrics, RolloutRevin};
pub use model::{
    loss, Architecture, ForecastModel, ForecastNet, LossPositions, ModelConfig, Tuning,
};
pub use report::{param_report, GroupCount, ParamReport};
pub use train::{train, EpochLosses, TrainConfig, TrainReport};
