//! Report-generation model built from a bidirectional Mamba vision encoder,
//! slice-targeted LoRA adapters and a decoder-only language model whose
//! selected layers carry gated cross-attention over the visual tokens.
//!
//! Everything in this crate is pure computation over `alloc` containers:
//! a small fp64 tape-based autodiff engine, the model, the training loop,
//! corpus metrics and a synthetic image/report generator. File formats and
//! the command-line surface live in the `emrrg` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod param;
pub mod peft;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{EmrrgModel, ModelConfig};
pub use param::{ParamId, ParamStore};
pub use tape::{Gradients, Session, Tape, Var};
pub use tensor::{Mask, Tensor};
