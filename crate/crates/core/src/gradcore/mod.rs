//! Reverse-mode differentiation, losses and optimization.

mod array;
pub mod nn;
mod optim;
mod tape;

pub use array::Array;
pub(crate) use array::gemm;
pub use optim::{AdamW, AdamWConfig, ParamId, ParamStore, Parameter, StepReport};
pub use tape::{Gradients, Tape, Var};
