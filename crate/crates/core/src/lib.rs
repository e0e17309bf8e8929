pub mod audio;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod param;
pub mod schedule;
pub mod seed;
pub mod store;
pub mod tensor;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use tensor::Tensor;
