pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod histogram;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
