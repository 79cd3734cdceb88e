pub mod dataio;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;
pub mod verify;
pub mod views;

pub use error::{Error, Result};
pub use numerics::{Precision, Scalar, Tensor};
