use std::fmt;

use crate::error::{Error, Result};
use crate::treebank::tree::Tree;

/// A transition of the top-down generative machine.
///
/// `S` is `String` for symbolic sequences and `u32` once symbols are
/// mapped to vocabulary ids. For `Gen` the payload is the generated token;
/// the batched machine reads tokens from the sentence cursor instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action<S = u32> {
    Nt(S),
    Gen(S),
    Reduce,
    Pad,
}

impl<S> Action<S> {
    pub fn is_nt(&self) -> bool {
        matches!(self, Action::Nt(_))
    }

    pub fn is_gen(&self) -> bool {
        matches!(self, Action::Gen(_))
    }

    pub fn is_reduce(&self) -> bool {
        matches!(self, Action::Reduce)
    }

    pub fn is_pad(&self) -> bool {
        matches!(self, Action::Pad)
    }
}

impl Action<u32> {
    /// Position in the scored inventory of `n_nt + 2` actions: nonterminals
    /// first, then GEN, then REDUCE. PAD is never scored.
    pub fn index(&self, n_nt: usize) -> Option<usize> {
        match self {
            Action::Nt(x) => Some(*x as usize),
            Action::Gen(_) => Some(n_nt),
            Action::Reduce => Some(n_nt + 1),
            Action::Pad => None,
        }
    }

    /// Inverse of [`Action::index`]; GEN carries `token`.
    pub fn from_index(index: usize, n_nt: usize, token: u32) -> Self {
        if index < n_nt {
            Action::Nt(index as u32)
        } else if index == n_nt {
            Action::Gen(token)
        } else {
            Action::Reduce
        }
    }
}

impl<S: fmt::Display> fmt::Display for Action<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Nt(x) => write!(f, "NT({x})"),
            Action::Gen(w) => write!(f, "GEN({w})"),
            Action::Reduce => write!(f, "REDUCE"),
            Action::Pad => write!(f, "PAD"),
        }
    }
}

/// Top-down, left-to-right oracle: NT on entering a nonterminal, GEN per
/// terminal, REDUCE on leaving.
pub fn oracle_actions(tree: &Tree) -> Vec<Action<String>> {
    let mut out = Vec::new();
    push_actions(tree, &mut out);
    out
}

fn push_actions(tree: &Tree, out: &mut Vec<Action<String>>) {
    match tree {
        Tree::Leaf(t) => out.push(Action::Gen(t.clone())),
        Tree::Node { label, children } => {
            out.push(Action::Nt(label.clone()));
            children.iter().for_each(|c| push_actions(c, out));
            out.push(Action::Reduce);
        }
    }
}

/// Rebuilds the tree generated by a complete symbolic action sequence.
pub fn replay(actions: &[Action<String>]) -> Result<Tree> {
    let mut open: Vec<(String, Vec<Tree>)> = Vec::new();
    let mut done: Option<Tree> = None;
    for (step, a) in actions.iter().enumerate() {
        let bad = |msg: &str| Error::InvalidSequence {
            step,
            msg: msg.to_string(),
        };
        if done.is_some() {
            return Err(bad("action after the root was closed"));
        }
        match a {
            Action::Nt(label) => open.push((label.clone(), Vec::new())),
            Action::Gen(tok) => open
                .last_mut()
                .ok_or_else(|| bad("GEN with no open nonterminal"))?
                .1
                .push(Tree::leaf(tok.clone())),
            Action::Reduce => {
                let (label, children) = open.pop().ok_or_else(|| bad("REDUCE with no open nonterminal"))?;
                if children.is_empty() {
                    return Err(bad("REDUCE of an empty constituent"));
                }
                let node = Tree::node(label, children);
                match open.last_mut() {
                    Some(parent) => parent.1.push(node),
                    None => done = Some(node),
                }
            }
            Action::Pad => return Err(bad("PAD inside a sequence")),
        }
    }
    done.ok_or_else(|| Error::InvalidSequence {
        step: actions.len(),
        msg: "sequence ends with open nonterminals".into(),
    })
}

/// Maximum stack-top pointer reached while simulating a complete sequence;
/// the smallest depth bound that lets the sentence run.
pub fn min_stack_depth<S>(actions: &[Action<S>]) -> Result<usize> {
    let mut top = 0usize;
    let mut open: Vec<usize> = Vec::new();
    let mut max = 0usize;
    let mut closed = false;
    for (step, a) in actions.iter().enumerate() {
        let bad = |msg: &str| Error::InvalidSequence {
            step,
            msg: msg.to_string(),
        };
        if closed {
            return Err(bad("action after the root was closed"));
        }
        match a {
            Action::Nt(_) => {
                open.push(top + 1);
                top += 1;
            }
            Action::Gen(_) => {
                if open.is_empty() {
                    return Err(bad("GEN with no open nonterminal"));
                }
                top += 1;
            }
            Action::Reduce => {
                let start = open.pop().ok_or_else(|| bad("REDUCE with no open nonterminal"))?;
                if start == top {
                    return Err(bad("REDUCE of an empty constituent"));
                }
                top = start;
                closed = open.is_empty();
            }
            Action::Pad => return Err(bad("PAD inside a sequence")),
        }
        max = max.max(top);
    }
    if !closed {
        return Err(Error::InvalidSequence {
            step: actions.len(),
            msg: "sequence ends with open nonterminals".into(),
        });
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::tree::parse_tree;

    fn shown(actions: &[Action<String>]) -> Vec<String> {
        actions.iter().map(ToString::to_string).collect()
    }

    #[test]
    fn oracle_of_two_constituent_sentence() {
        let t = parse_tree("(S (NP the dog) (VP barks))").unwrap();
        let a = oracle_actions(&t);
        assert_eq!(
            shown(&a),
            [
                "NT(S)", "NT(NP)", "GEN(the)", "GEN(dog)", "REDUCE", "NT(VP)", "GEN(barks)", "REDUCE", "REDUCE"
            ]
        );
        assert_eq!(min_stack_depth(&a).unwrap(), 4);
        assert_eq!(replay(&a).unwrap(), t);
    }

    #[test]
    fn oracle_of_single_constituent() {
        let a = oracle_actions(&parse_tree("(NP dog)").unwrap());
        assert_eq!(shown(&a), ["NT(NP)", "GEN(dog)", "REDUCE"]);
        assert_eq!(min_stack_depth(&a).unwrap(), 2);
    }

    #[test]
    fn depth_of_unary_chain() {
        let a = oracle_actions(&parse_tree("(A (B (C x)))").unwrap());
        assert_eq!(min_stack_depth(&a).unwrap(), 4);
    }

    #[test]
    fn invalid_sequences_are_rejected() {
        let nt = || Action::Nt("X".to_string());
        let gen = || Action::Gen("w".to_string());
        let cases: Vec<Vec<Action<String>>> = vec![
            vec![Action::Reduce],
            vec![gen()],
            vec![nt(), Action::Reduce],
            vec![nt(), gen()],
            vec![nt(), gen(), Action::Reduce, gen()],
        ];
        for c in cases {
            assert!(min_stack_depth(&c).is_err(), "{c:?}");
            assert!(replay(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn index_round_trip() {
        for (a, i) in [(Action::Nt(3u32), 3), (Action::Gen(9), 5), (Action::Reduce, 6)] {
            assert_eq!(a.index(5), Some(i));
            assert_eq!(Action::from_index(i, 5, 9), a);
        }
        assert_eq!(Action::<u32>::Pad.index(5), None);
    }
}
