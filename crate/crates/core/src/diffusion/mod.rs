//! Gaussian diffusion in latent space: schedules, the closed-form forward
//! process, the noise-prediction objective, ancestral sampling and
//! deterministic DDIM inversion/generation.

mod denoiser;
mod process;
mod schedule;
mod train;

pub use denoiser::{ConvDenoiser, CountingDenoiser, Denoiser, DenoiserConfig};
pub use process::{
    ddim_generate, ddim_invert, ddim_timesteps, denoise_loss, forward_diffuse, sample_ddpm,
    sample_ddpm_batch,
};
pub use schedule::NoiseSchedule;
pub use train::{train_diffusion, DiffusionTrainLog};
