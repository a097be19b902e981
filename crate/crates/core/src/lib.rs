//! Malware classification from executable bytes rendered as RGB images.

mod error;

pub mod bin2img;
pub mod cascade;
pub mod cli;
pub mod data;
pub mod densenet;
pub mod eval;
pub mod levit;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use levitmc_tensor as tensor;
