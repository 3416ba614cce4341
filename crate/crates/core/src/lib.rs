pub mod cam;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod predictor;
pub mod pseudo;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
