pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod trainer;
pub mod vcn;

pub use error::{Error, Result};
