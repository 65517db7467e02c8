//! Span masking, masked-prediction losses, the learning-rate schedule,
//! Adam and the pretraining step.

mod loss;
mod mask;
mod optim;
mod train;

pub use loss::{layer_loss, supervised_losses, total_loss, LayerLoss};
pub use mask::{sample_mask, MaskConfig, MaskSpec};
pub use optim::{batch_gradients, Adam, LrSchedule, OptimConfig};
pub use train::{
    derive_seed, mask_seed, pretrain_step, LayerMetrics, SslConfig, StepMetrics, TrainUtterance,
};
