//! Multimodal sensor fusion toolkit.

pub mod autograd;
pub mod colearn;
pub mod embedding;
pub mod error;
pub(crate) mod fsutil;
pub mod fusion;
pub mod harness;
pub mod matrix;
pub mod mvrnn;
pub mod nn;
pub mod statespace;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
