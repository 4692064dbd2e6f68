//! Analytical performance and memory model for distributed LLM training and
//! inference, plus hardware design-space exploration.

pub mod arch;
pub mod comm;
pub mod config;
pub mod dse;
pub mod engine;
pub mod error;
pub mod kernelperf;
pub mod memory;
pub mod parallelism;
pub mod report;
pub mod validate;
pub mod workload;

pub use error::{Error, Result};
