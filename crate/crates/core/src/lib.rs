pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod align;
pub mod analytic;
pub mod bank;
pub mod config;
pub mod export;
pub mod flow_match;
pub mod grpo;
pub mod sampler;
pub mod task;
pub mod trainer;
pub mod velocity;
