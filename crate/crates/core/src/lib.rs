//! Sparse spiking convolutional networks for event-camera data.

pub mod autograd;
pub mod error;
pub mod event_io;
pub mod sparse_tensor;
pub mod spiking;
pub mod training;

pub use error::{Error, Result};
