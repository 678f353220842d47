//! Trajectory-aware timestep sampling and the windowed preference update.
//!
//! Training timesteps are drawn near the timesteps a shifted sampler would
//! actually visit: a noise level σ is pushed through the shift map
//! `σ̃ = s·σ / (1 + (s − 1)·σ)`, rounded to an anchor `round(σ̃·T)`, jittered by
//! a Gaussian offset, and clipped. Each window mixes `n_high` timesteps from
//! `[0.8T, T]` with `n_low` from below and accumulates their gradients.

mod loss;
mod timesteps;

pub use loss::{
    accumulate_window_gradients, apo_window_step, apo_window_step_with_noise, dpo_pair_loss,
    dpo_term_on_tape, draw_window_noise, window_loss, DpoTerm, PairNoise, PairSource, PreferenceBatch,
    PreferencePair, WindowOutcome,
};
pub use timesteps::{
    anchor_timestep, draw_uniform_window, draw_window, draw_window_with_shift, offset_timestep,
    perturb_timestep, shift_sigma, window_from_sigmas, ApoSamplerConfig, Regime, TimestepMode,
    WindowDraw, WindowSampler,
};

use crate::diffusion::DiffusionError;
use crate::ndtensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ApoError {
    #[error("sigma {sigma} / shift {shift} outside the shift map's domain")]
    OutOfDomain { sigma: f64, shift: f64 },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("expected {expected} noise draws for the window, got {got}")]
    NoiseCount { expected: usize, got: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("window aborted at timestep {timestep}: {reason}")]
    WindowAborted { timestep: usize, reason: String },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests;
