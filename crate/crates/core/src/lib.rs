pub mod advrob;
pub mod atex;
pub mod data;
pub mod error;
pub mod explain;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod xmanip;

pub use error::{Error, Result};
pub use tensor::Tensor;
