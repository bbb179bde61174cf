//! Forward-process schedules, the epsilon-prediction network, toy data and
//! pre-training.

pub mod data;
pub mod network;
pub mod schedule;
pub mod train;

pub use network::{time_embedding, NetworkConfig, ScoreNetwork};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use train::{denoising_loss, train_ddpm, DenoisingBatch, LossWeighting, TrainConfig, TrainOutput};
