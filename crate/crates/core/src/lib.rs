pub mod attention;
pub mod coding;
pub mod config;
pub mod conversion;
pub mod data;
pub mod energy;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
