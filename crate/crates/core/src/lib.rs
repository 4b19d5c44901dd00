//! Masked audio modeling building blocks: a small reverse-mode tensor
//! engine, the log-mel front-end, patch masking, the encoder/decoder model,
//! a frozen patch-aligned teacher and the training objectives.

pub mod dsp;
pub mod error;
pub mod checkpoint;
pub mod model;
pub mod objectives;
pub mod patching;
pub mod pipeline;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
