//! DDPM schedule, the ε-predicting denoiser, its training objective, and
//! truncated purification.

mod denoiser;
mod sample;
mod schedule;
mod select;
mod train;

pub use denoiser::{CondConfig, Conditioner, Denoiser, DenoiserConfig};
pub use sample::{
    fast_reverse_from, fast_sample, purify, purify_with, reverse_from, FastSchedule, PurifierConfig, Sampler,
};
pub use schedule::{q_sample, reverse_step, single_forward_step, NoiseSchedule, ScheduleConfig};
pub use select::{default_grid, select_on_curve, select_t_star, TStarPoint, TStarSelection, TrialSet};
pub use train::{denoising_loss, train_dap, DapTrainConfig, DapTrainMode, LossItem, TrainedDap};
