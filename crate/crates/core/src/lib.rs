//! CPU inference workbench for attention-map reuse and attention-head pruning
//! in Transformer, Conformer and all-attention layer stacks.

pub mod error;
pub mod layers;
pub mod profile;
pub mod pruning;
pub mod reuse;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
