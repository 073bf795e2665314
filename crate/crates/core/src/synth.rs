//! Deterministic tree generators and small fixtures used by tests,
//! benchmarks and the self-check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::treebank::{parse_tree, SymbolTable, Tree, Vocab};

/// Shape limits for [`random_tree`].
#[derive(Clone, Copy, Debug)]
pub struct TreeShape {
    pub max_depth: usize,
    pub n_labels: usize,
    pub n_words: usize,
    pub max_children: usize,
    /// Probability that a child below the depth limit is a terminal.
    pub leaf_prob: f64,
}

impl Default for TreeShape {
    fn default() -> Self {
        Self {
            max_depth: 8,
            n_labels: 5,
            n_words: 50,
            max_children: 3,
            leaf_prob: 0.55,
        }
    }
}

pub fn label_name(i: usize) -> String {
    format!("X{i}")
}

pub fn word_name(i: usize) -> String {
    format!("w{i}")
}

/// Random tree with at most `shape.max_depth` nonterminal levels.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, shape: &TreeShape) -> Tree {
    grow(rng, shape, 1)
}

fn grow<R: Rng + ?Sized>(rng: &mut R, shape: &TreeShape, depth: usize) -> Tree {
    let label = label_name(rng.gen_range(0..shape.n_labels));
    let n = rng.gen_range(1..=shape.max_children);
    let children = (0..n)
        .map(|_| {
            if depth >= shape.max_depth || rng.gen_bool(shape.leaf_prob) {
                Tree::leaf(word_name(rng.gen_range(0..shape.n_words)))
            } else {
                grow(rng, shape, depth + 1)
            }
        })
        .collect();
    Tree::node(label, children)
}

pub fn random_trees(seed: u64, n: usize, shape: &TreeShape) -> Vec<Tree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_tree(&mut rng, shape)).collect()
}

/// English-like sentences from a small phrase-structure grammar; lengths
/// mostly between 4 and 30 tokens.
pub fn synthetic_corpus(seed: u64, n: usize, n_words: usize) -> Vec<Tree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grammar { rng: &mut rng, n_words };
    (0..n).map(|_| g.sentence(0)).collect()
}

struct Grammar<'a> {
    rng: &'a mut ChaCha8Rng,
    n_words: usize,
}

impl Grammar<'_> {
    fn word(&mut self, class: &str) -> Tree {
        // Zipf-ish draw so frequent words dominate.
        let r: f64 = self.rng.gen();
        let i = ((self.n_words as f64).powf(r) as usize).saturating_sub(1).min(self.n_words - 1);
        Tree::leaf(format!("{class}{i}"))
    }

    fn np(&mut self, depth: usize) -> Tree {
        let mut kids = vec![self.word("d"), self.word("n")];
        if self.rng.gen_bool(0.3) {
            kids.insert(1, self.word("a"));
        }
        let np = Tree::node("NP", kids);
        if depth < 3 && self.rng.gen_bool(0.25) {
            Tree::node("NP", vec![np, self.pp(depth + 1)])
        } else {
            np
        }
    }

    fn pp(&mut self, depth: usize) -> Tree {
        let p = self.word("p");
        Tree::node("PP", vec![p, self.np(depth)])
    }

    fn vp(&mut self, depth: usize) -> Tree {
        let mut kids = vec![self.word("v")];
        let r: f64 = self.rng.gen();
        if r < 0.45 {
            kids.push(self.np(depth + 1));
        } else if r < 0.6 && depth < 2 {
            kids.push(Tree::node("SBAR", vec![self.word("c"), self.sentence(depth + 1)]));
        }
        if depth < 3 && self.rng.gen_bool(0.3) {
            kids.push(self.pp(depth + 1));
        }
        Tree::node("VP", kids)
    }

    fn sentence(&mut self, depth: usize) -> Tree {
        let subj = self.np(depth + 1);
        let vp = self.vp(depth + 1);
        Tree::node("S", vec![subj, vp])
    }
}

/// A sentence of exactly `len` tokens with a right-branching spine of
/// bounded depth, used to probe the inference depth bound.
pub fn long_sentence(len: usize) -> Tree {
    let mut leaves: Vec<Tree> = (0..len).map(|i| Tree::leaf(word_name(i % 7))).collect();
    let mut tail = Vec::new();
    while leaves.len() > 4 {
        let cut = leaves.len() - 4;
        let chunk: Vec<Tree> = leaves.split_off(cut);
        tail.insert(0, Tree::node("NP", chunk));
    }
    leaves.extend(tail);
    Tree::node("S", leaves)
}

/// Fifty sentences drawn from four distinct trees that share long
/// deterministic stretches; the corpus entropy per action is small enough
/// for a model to memorise it.
pub fn overfit_treebank() -> Vec<Tree> {
    let subjects = ["(NP the dog)", "(NP the old cat)"];
    let objects = ["(NP the red ball)", "(NP a stick)"];
    let mut out = Vec::new();
    for i in 0..50 {
        let s = subjects[i % 2];
        let o = objects[(i / 2) % 2];
        let line = format!("(S {s} (VP chased {o} (PP into (NP the big park))) .)");
        out.push(parse_tree(&line).expect("fixture parses"));
    }
    out
}

/// Tiny grammar for exhaustive-search checks: two labels, three words,
/// sentences of one to four tokens.
pub fn toy_treebank(seed: u64, n: usize) -> Vec<Tree> {
    let shape = TreeShape {
        max_depth: 3,
        n_labels: 2,
        n_words: 3,
        max_children: 2,
        leaf_prob: 0.6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let t = random_tree(&mut rng, &shape);
        if t.leaves().len() <= 4 {
            out.push(t);
        }
    }
    out
}

/// Vocabulary of [`toy_treebank`]: exactly three words and two labels,
/// with no unknown-word entry.
pub fn toy_vocab() -> Vocab {
    let mut words = SymbolTable::new();
    let mut nts = SymbolTable::new();
    (0..3).for_each(|i| {
        words.add(&word_name(i), 1);
    });
    (0..2).for_each(|i| {
        nts.add(&label_name(i), 1);
    });
    Vocab { words, nts }
}

/// The three partial stacks of the worked batched-stack example, each
/// completed to a full tree. After five oracle actions every row sits at
/// the configuration shown in the example; the sixth actions are
/// `NT(VP)`, `GEN(said)` and `REDUCE`.
pub fn worked_example_trees() -> Vec<Tree> {
    [
        "(S So (NP it) (VP goes))",
        "(S (NP he) (VP said (NP nothing)))",
        "(S (NP (NP A branch) (PP of (NP the tree))) (VP fell))",
    ]
    .iter()
    .map(|l| parse_tree(l).expect("fixture parses"))
    .collect()
}

/// Shuffled copy, deterministic in `seed`.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{normalize, oracle_actions, replay};

    #[test]
    fn generators_are_deterministic() {
        let s = TreeShape::default();
        assert_eq!(random_trees(3, 20, &s), random_trees(3, 20, &s));
        assert_eq!(synthetic_corpus(1, 20, 100), synthetic_corpus(1, 20, 100));
    }

    #[test]
    fn random_trees_round_trip() {
        for t in random_trees(11, 1000, &TreeShape::default()) {
            let text = t.to_string();
            assert_eq!(parse_tree(&text).unwrap(), t);
            assert_eq!(normalize(&text), text);
            assert_eq!(replay(&oracle_actions(&t)).unwrap(), t);
        }
    }

    #[test]
    fn long_sentence_has_requested_length() {
        for n in [1, 4, 5, 60, 150] {
            assert_eq!(long_sentence(n).leaves().len(), n);
        }
    }

    #[test]
    fn fixtures_have_expected_shape() {
        assert_eq!(overfit_treebank().len(), 50);
        for t in toy_treebank(0, 30) {
            assert!(t.leaves().len() <= 4);
        }
        let f = worked_example_trees();
        for (t, sixth) in f.iter().zip(["NT(VP)", "GEN(said)", "REDUCE"]) {
            assert_eq!(oracle_actions(t)[5].to_string(), sixth);
        }
    }
}
