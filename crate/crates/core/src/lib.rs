pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fixtures;
pub mod model;
pub mod numerics;
pub mod subword;
pub mod training;
pub mod util;

pub use error::{CheckpointError, Error, Result};
