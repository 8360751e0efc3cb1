//! Desk-scale distillation of prompt encoders.

pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::{Real, Tensor};
pub mod model;

pub use model::{forward, forward_batch, EncoderConfig, EncoderParams, Params};
pub mod data;
pub mod loss;
pub mod permute;

pub use data::{synthetic_prompts, PromptSet};
pub use loss::{loss_consistency, loss_cos, loss_mse, total_loss, LossBreakdown, LossWeights};
pub use permute::word_permute;
pub mod optim;
pub mod train;

pub use optim::LrSchedule;
pub use train::{evaluate, teacher_targets, train, DistillTask, Evaluation, TrainConfig, TrainRun};
pub mod io;
