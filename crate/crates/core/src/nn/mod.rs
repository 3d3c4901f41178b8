//! Sequential networks, reverse-mode gradients, the cost-weighted objective and SGD.

pub mod layers;
mod model;
mod optim;
mod spec;
mod train;

pub use model::{CacRecord, Forward, Model, Param, Phase};
pub use optim::{sgd_step, weighted_product_loss, LrSchedule, Objective, OptimizerConfig, OptimizerState};
pub use spec::{GateInit, LayerSpec, ModelSpec, Shape};
pub use train::{
    evaluate, forward_backward, metrics_jsonl, objective_value, train, CostContext, EpochMetrics, EvalReport,
    LayerRho, LayerRhoStats, StepRecord, StepStats, TrainConfig, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE,
};
