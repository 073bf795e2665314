//! Bracketed trees, top-down oracles, vocabularies and subword segmentation.

mod bpe;
mod oracle;
mod tree;
mod vocab;

pub use bpe::{bpe_apply, bpe_train, reassemble, segment_tree, unit_owners, Merges, WORD_START};
pub use oracle::{min_stack_depth, oracle_actions, replay, Action};
pub use tree::{normalize, parse_tree, read_treebank, Tree};
pub use vocab::{build_vocab, unk_signature, SymbolTable, Vocab, UNK};
