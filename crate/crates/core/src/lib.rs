pub mod augment;
pub mod bench;
pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod meml;
pub mod rng;
pub mod tensor;

pub use error::{FusionError, Result};
