//! Bit-exact software emulation of multiplication-free power-of-two training.

pub mod cli;
pub mod energy;
pub mod error;
pub mod mfmac;
pub mod nn;
pub mod potnum;
pub mod quantizer;

pub use error::{Error, Result};
