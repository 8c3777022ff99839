pub mod error;
pub mod harness;
pub mod limit;
pub mod numerics;
pub mod observables;
pub mod optim;
pub mod param;
pub mod resnet;

pub use error::{Error, Result};
