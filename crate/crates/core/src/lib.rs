pub mod awmtl;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
