pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod gate;
pub mod harness;
pub mod inference;
pub mod intervention;
pub mod mine;
pub mod nn;
pub mod predictor;
pub mod selector;
pub mod unknown;

pub use error::{Error, Result};
