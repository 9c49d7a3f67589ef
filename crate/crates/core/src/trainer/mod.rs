//! A small deterministic float64 autodiff engine with reference models,
//! optimizers and a training loop.

pub mod models;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use models::{
    architecture_for, finite_difference_gradient, Architecture, Batch, ForwardError, ForwardPass, LossKind,
    ModelError, ModelInstance,
};
pub use optim::{OptimError, OptimizerKind, OptimizerState, Scheduler};
pub use tape::{ParamGrad, Tape, Var};
pub use tensor::{ShapeError, Tensor};
pub use train::{
    batch_fit_estimate, evaluate_loss, fit_batch, history_csv, load_checkpoint, predict, save_checkpoint, train, BatchFitEstimate, EpochRecord, TrainConfig, TrainError,
    TrainRunResult, EVAL_BATCH, TRAIN_BATCH,
};
