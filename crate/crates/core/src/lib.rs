pub mod attack;
pub mod data;
pub mod error;
pub mod io;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
