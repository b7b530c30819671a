//! Losses, Adam, data preparation, the data-parallel training loop and
//! evaluation against the full-ensemble spread.

mod adam;
mod data;
mod eval;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{
    destandardize_target, model_input, model_target, prepare, Dataset, InputConfig, ReducedSample, StatsAccumulator,
};
pub use eval::{
    evaluate, fit_linear_on, EvalConfig, EvalReport, EvalRow, LinearEstimator, ModelEstimator, SpreadEstimator,
};
pub use loss::{mse, mse_loss, rmse_metric, SquaredError};
pub use trainer::{
    batch_gradients, curve_csv, dataset_rmse, shard_gradients, train, CurvePoint, StepGrad, TrainConfig, TrainOutcome,
};
