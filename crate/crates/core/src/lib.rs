pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod msgr;
pub mod net;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
