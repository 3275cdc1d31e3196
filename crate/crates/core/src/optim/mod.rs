//! Losses, metrics, Adam, adaptive density control and the training loop.

pub mod adam;
pub mod config;
pub mod density;
pub mod loss;
pub mod metrics;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use config::{DensityConfig, LearningRates, ObjectAppearance, TrainConfig};
pub use density::{density_control, DensityReport, GradStats, NodeRemap};
pub use loss::{total_loss, FrameTarget, LossOutput, LossWeights};
pub use metrics::{psnr, ssim};
pub use train::{evaluate, split_frames, train, MetricRecord, TrainData, TrainEvent, TrainOutcome, TrainView, Trainer};
