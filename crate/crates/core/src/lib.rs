pub mod autodiff;
pub mod class_extraction;
pub mod cli;
pub mod data;
pub mod error;
pub mod feature_reconstruction;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod semantics_attention;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
