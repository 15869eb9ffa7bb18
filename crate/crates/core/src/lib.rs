pub mod cli;
pub mod codec;
pub mod corpus;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod refine;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
