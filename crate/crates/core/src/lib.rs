pub mod autodiff;
pub mod backends;
pub mod checkpoint;
pub mod config;
pub mod demorpher;
pub mod dmad;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod toyworld;
pub mod training;
pub mod types;
pub mod util;

pub use error::{Error, Result};
