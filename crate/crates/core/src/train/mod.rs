//! Gradients, losses, AdamW and the training loop.

mod layer;
mod loss;
mod optim;
mod trainer;

pub use layer::{adapter_backward, AdaptedLinear, AdapterGrads, ForwardCache};
pub use loss::{accuracy, argmax_column, cross_entropy_loss, mse_loss, softmax_columns};
pub use optim::{AdamWConfig, LrSchedule, OptimizerState};
pub use trainer::{train, train_objective, BatchSource, Objective, Targets, TrainConfig, TrainRecord, TrainReport};

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Agreement test for one gradient entry: relative error below `1e-6`, or an
/// absolute difference below `1e-9`.
pub fn gradient_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-9 || diff / analytic.abs().max(numeric.abs()) < 1e-6
}
