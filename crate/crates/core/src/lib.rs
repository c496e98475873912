pub mod dgmae;
pub mod diffmath;
pub mod error;
pub mod graph;
pub mod isg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
