pub mod diffusion;
pub mod numerics;
pub mod schedule;
pub mod data;
pub mod denoiser;
pub mod metrics;
pub mod pipeline;
