//! Dual-head adversarial training: autodiff tensors, residual networks with
//! a logits-fusion CNN, ℓ∞ attacks, robust objectives and staged training.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod merge;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
