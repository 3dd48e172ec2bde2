//! Continual learning over a frozen MLM-pretrained transformer with neighbor
//! attention against global token prototypes.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod neighbor;
pub mod objectives;
pub mod runner;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};
