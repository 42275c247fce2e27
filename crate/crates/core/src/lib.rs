mod codec;
pub mod config;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod preprocess;
pub mod runner;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CastError, Result};
pub use params::ParamSet;
pub use tensor::{DType, Fill, GradientMap, Graph, Real, Tensor, Var};
