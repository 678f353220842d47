//! Trajectory-aware direct preference optimization for a toy conditional
//! diffusion model over 2-D data, plus the staged alignment curriculum built
//! on top of it.
//!
//! Layout:
//! - [`ndtensor`]: dense arrays, reverse-mode autodiff, AdamW, checkpoints
//! - [`diffusion`]: noise schedule, ε-prediction MLP, guidance, DDIM sampling
//! - [`apo`]: shifted/offset timestep windows and the windowed DPO update
//! - [`synthworld`]: the 2-D mixture task, ranking oracle, datasets, metrics
//! - [`pipeline`]: the six-stage run (pretrain through distillation-aware DPO)

pub mod apo;
pub mod config;
pub mod diffusion;
pub mod ndtensor;
pub mod pipeline;
pub mod rng;
pub mod synthworld;

pub use ndtensor::{ParamSet, Tensor, TensorError};
