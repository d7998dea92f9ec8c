//! Factor graph attention for multi-utility retrieval.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fga;
pub mod harness;
pub mod math;
pub mod model;

pub use error::{FgaError, Result};
