pub mod autodiff;
pub mod config;
pub mod checkpoint;
pub mod contrastive;
pub mod correlation;
pub mod data;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;
