//! Dense arrays, forward kernels and a tape for reverse-mode
//! differentiation, sized for stack-LSTM models.
//!
//! Two executors implement [`Backend`]: [`Tape`] records every operation
//! so [`Tape::backward`] can return gradients by parameter name, while
//! [`Eager`] evaluates directly and updates indexed slots in place.

mod array;
mod backend;
mod error;
pub mod kernels;
mod params;
mod tape;

pub use array::{Array, Scalar};
pub use backend::{Backend, Eager};
pub use error::{Result, TensorError};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, NodeId, Tape};

/// Element precision chosen at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}
