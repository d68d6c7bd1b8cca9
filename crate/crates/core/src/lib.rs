pub mod dataset;
pub mod error;
pub mod network;
pub mod pipeline;
pub mod plot;
pub mod profiles;
pub mod rng;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};
