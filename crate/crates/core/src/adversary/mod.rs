//! Discriminator bank, LSGAN / feature-matching losses and the adversarial
//! codec training loop.

mod bank;
mod losses;
mod train;

pub use bank::{period_view, BankConfig, DiscriminatorBank, DiscriminatorOutput, PeriodConfig, ScaleConfig, StftConfig};
pub use losses::{feature_matching_loss, generator_total_loss, lsgan_d_loss, lsgan_g_loss, GanLossWeights, GeneratorLoss};
pub use train::{dlt_train, reconstruction_mel_loss, GanState, StepMetrics, TrainConfig, TrainReport};
