pub mod alignment;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gendec;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
