//! Word-synchronous beam search over batches of sentences, plus the
//! quantities computed from it: best parses, prefix probabilities,
//! perplexity, bracket F1 and minimal-pair scores.

mod enumerate;
mod io;
mod metrics;
mod search;

pub use enumerate::{enumerate, Enumeration};
pub use io::{
    merge_subword_actions, pairs_eval, parse_sentences, prepare, read_suite, PairResult, PairSide, ParseRecord, Parsed,
    Prepared, SuiteItem,
};
pub use metrics::{bracket_counts, bracket_f1, corpus_f1, perplexity, region_score, token_increments, token_ppl, Prf};
pub use search::{batched_beam, beam_batch, group_sentences, word_sync_beam, BeamConfig, BeamResult};
