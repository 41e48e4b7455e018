pub mod error;
pub mod infer;
pub mod data;
pub mod mrf;
pub mod nn;
pub mod pipeline;
pub mod selftrain;
pub mod space;

pub use error::{Error, Result};
