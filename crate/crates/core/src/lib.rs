pub mod blocks;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
