//! Recurrent neural network grammars with a batched stack machine.
//!
//! Sentences in a mini-batch share one stack tensor; pointer vectors track
//! each row's stack top, open nonterminals and next token, so training and
//! word-synchronous beam search run without per-sentence loops.

pub mod beam;
pub mod checks;
pub mod error;
pub mod model;
pub mod stack;
pub mod synth;
pub mod trainer;
pub mod treebank;

pub use error::{Error, Result};
