pub mod baselines;
pub mod data;
pub mod experiment;
pub mod error;
pub mod federation;
pub mod nn;
pub mod oracle;
pub mod priors;
pub mod transition;

pub use error::{Error, Result};
