//! Conditional denoising diffusion model with inpainting sampler.

pub mod config;
pub mod network;
pub mod sampler;
pub mod schedule;
pub mod trajectory;
pub mod train;

pub use config::DiffusionConfig;
pub use network::{time_embedding, Architecture, DenoiserWeights, Dense, ModelWeights};
pub use sampler::{
    forward_diffuse, predict_mean, sample_inpaint, sample_inpaint_batch, step_logprob, transition_logprob,
    InpaintRequest,
};
pub use schedule::{make_schedule, Schedule};
pub use train::{init_weights, train_base, train_base_with, TrainOptions, TrainedModel};
pub use trajectory::Trajectory;
