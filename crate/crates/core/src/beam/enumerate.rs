use rnng_tensor::{Backend, BoundParams, Scalar};

use crate::error::{Error, Result};
use crate::model::reference::{RefState, Reference};
use crate::model::ModelConfig;
use crate::treebank::Action;

/// Exact quantities over every legal action sequence of a sentence.
#[derive(Clone, Debug)]
pub struct Enumeration {
    /// Log of the summed probability of all sequences ending in the GEN of
    /// each token.
    pub prefix_logp: Vec<f64>,
    /// Number of such sequences per token.
    pub prefixes: Vec<usize>,
    /// Log marginal probability of the sentence.
    pub sentence_logp: f64,
    pub best_actions: Vec<Action>,
    pub best_logp: f64,
    pub complete: usize,
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Walks the tree of all legal action sequences with the unbatched
/// reference model. Exponential in the sentence length; meant for tiny
/// grammars with a small open-nonterminal bound.
pub fn enumerate<B: Backend>(bk: &B, cfg: &ModelConfig, p: &BoundParams<B>, tokens: &[u32], depth: usize, limit: usize) -> Result<Enumeration> {
    if tokens.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let r = Reference::new(bk, cfg, p);
    let mut out = Enumeration {
        prefix_logp: vec![f64::NEG_INFINITY; tokens.len()],
        prefixes: vec![0; tokens.len()],
        sentence_logp: f64::NEG_INFINITY,
        best_actions: Vec::new(),
        best_logp: f64::NEG_INFINITY,
        complete: 0,
    };
    let mut path = Vec::new();
    let mut visited = 0;
    walk(&r, cfg, tokens, depth, &r.initial(), 0.0, &mut path, &mut out, &mut visited, limit)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk<B: Backend>(
    r: &Reference<B>,
    cfg: &ModelConfig,
    tokens: &[u32],
    depth: usize,
    st: &RefState<B>,
    score: f64,
    path: &mut Vec<Action>,
    out: &mut Enumeration,
    visited: &mut usize,
    limit: usize,
) -> Result<bool> {
    *visited += 1;
    if *visited > limit {
        return Err(Error::Config(format!("enumeration exceeded {limit} states")));
    }
    if st.closed {
        out.complete += 1;
        out.sentence_logp = lse(out.sentence_logp, score);
        if score > out.best_logp {
            out.best_logp = score;
            out.best_actions = path.clone();
        }
        return Ok(true);
    }
    let n = cfg.n_nts;
    let mut any = false;
    let legal = r.legal(st, tokens.len(), cfg.max_open_nt, depth);
    let alp: Vec<f64> = r.bk().value(&r.action_log_probs(st)?).data().iter().map(|v| v.as_f64()).collect();
    for (i, _) in legal.iter().enumerate().filter(|(_, &ok)| ok) {
        let mut s = score + alp[i];
        let a = if i == n {
            let w = tokens[st.consumed];
            s += r.bk().value(&r.word_log_probs(st)?).data()[w as usize].as_f64();
            Action::Gen(w)
        } else {
            Action::from_index(i, n, 0)
        };
        let next = r.apply(st, &a, None)?;
        path.push(a);
        let live = walk(r, cfg, tokens, depth, &next, s, path, out, visited, limit)?;
        path.pop();
        // Prefixes that cannot be completed within the depth bound are
        // left out, as beam search never keeps them.
        if live && a.is_gen() {
            let t = st.consumed;
            out.prefix_logp[t] = lse(out.prefix_logp[t], s);
            out.prefixes[t] += 1;
        }
        any |= live;
    }
    Ok(any)
}
