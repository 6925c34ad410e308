//! Event-stream super-resolution with a two-stream, bilateral
//! information exchange network.

pub mod bie;
pub mod error;
pub mod eval;
pub mod event;
pub mod kv;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
