//! Dense `f64` matrices with a recording tape for reverse-mode gradients.
//!
//! Every value on the [`Tape`] is a row-major matrix; vectors are `1 × n`
//! rows. Parameters live in a [`ParamStore`] and are copied onto a fresh tape
//! for every forward pass. After [`Tape::backward`], gradients for the
//! parameters are collected with [`Grads::param_grads`] and applied with
//! [`Adam`].

mod adam;
mod error;
mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, relative_error};
pub use params::{derive_seed, Init, ParamId, ParamStore};
pub use tape::{Block, Grads, Tape, Var};
pub use tensor::Tensor;
