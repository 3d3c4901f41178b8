//! Content-aware convolution engine.
//!
//! A CAC layer partitions the `k × k` windows of its input into *sharp* and
//! *smooth* sets using a learnable gate on the Sobel gradient of the
//! channel-averaged feature map. Sharp windows get the full kernel, smooth
//! ones a `1 × 1` kernel formed by summing the full kernel's taps. The crate
//! provides the layer (inference and differentiable training modes), loop-level
//! reference oracles, an analytic multiply-add cost model, a small training
//! stack for CAC networks, and dataset/checkpoint I/O.

pub mod cac;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod tensor;
pub mod verify;

pub use cac::{
    aggregate_kernel, cac_backward, cac_forward_hard, cac_forward_soft, partition, score_map,
    sobel_gradient, CacConvParams, GateMode, PbarMode, WindowPartition,
};
pub use cost::{cost_penalty, madds_cac, madds_standard, model_cost, rho_upper_bound, CostReport, LayerCostSpec};
pub use error::{CacError, Result};
pub use tensor::{BorderMode, Scalar, Tensor};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use data::{load_cifar10, synth_dataset, Dataset, SynthKind};
pub use nn::{evaluate, forward_backward, train, weighted_product_loss, Model, ModelSpec, TrainConfig};
