pub mod autograd;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod evaluate;
pub mod extractor;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
