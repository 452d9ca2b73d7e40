pub mod backbone;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod numkernel;
pub mod optim;
pub mod prompt;
pub mod pruning;
pub mod tasks;

pub use error::{Error, Result};
