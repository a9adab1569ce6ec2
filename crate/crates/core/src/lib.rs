pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod pose;
pub mod probe;
pub mod seq_model;
pub mod tape;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
