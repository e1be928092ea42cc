//! Desk-scale laboratory for staged multimodal training.
//!
//! The crate wires a small vision transformer, a 2-layer MLP connector, and
//! a causal language decoder into one differentiable model, then drives the
//! three-stage gradual-feature-refinement schedule (connector warm-up, then
//! vision+connector alignment, then full-parameter training) over synthetic
//! data mixtures. Everything is deterministic and runs on one core in `f64`
//! so gradients can be checked against finite differences.

pub mod error;
pub mod tensor;
pub mod tape;

pub use error::{Error, Result};
pub use tape::{LossReduction, OpKind, Precision, Tape};
pub use tensor::Tensor;
