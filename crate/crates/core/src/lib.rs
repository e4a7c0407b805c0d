//! Dynamic filter selection for convolutional networks.
//!
//! A *backbone* CNN does the classification while a separate *gater* CNN looks
//! at the same input and emits one binary gate per backbone filter. Gates are
//! learned end to end through a noisy saturating-sigmoid relaxation with a
//! straight-through gradient, and an L1 penalty on the gates encourages
//! sparse filter usage.

pub mod analyze;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod semhash;
pub mod tensor;
pub mod train;
mod util;

pub use error::{Error, Result};
