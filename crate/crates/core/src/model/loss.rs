use rnng_tensor::{Backend, Scalar};

use crate::error::{Error, Result};
use crate::model::Net;
use crate::stack::{apply_step, init_batch, valid_actions};
use crate::treebank::{min_stack_depth, Action, Tree, Vocab};

/// A tree as ids: its token sequence, oracle actions and depth bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<u32>,
    pub actions: Vec<Action>,
    pub depth: usize,
}

pub fn encode_tree(vocab: &Vocab, tree: &Tree) -> Result<Encoded> {
    let actions = vocab.encode_actions(tree)?;
    let tokens = actions
        .iter()
        .filter_map(|a| match a {
            Action::Gen(w) => Some(*w),
            _ => None,
        })
        .collect();
    let depth = min_stack_depth(&actions)?;
    Ok(Encoded { tokens, actions, depth })
}

pub fn encode_corpus(vocab: &Vocab, trees: &[Tree]) -> Result<Vec<Encoded>> {
    trees.iter().map(|t| encode_tree(vocab, t)).collect()
}

pub struct LossOutput<B: Backend> {
    /// Summed negative log-likelihood, on the backend.
    pub total: B::Tensor,
    /// Per-sentence negative log-likelihoods.
    pub per_sentence: Vec<f64>,
    /// Number of scored (non-PAD) actions.
    pub n_actions: usize,
}

/// Teacher-forced negative log-likelihood of a batch. Each step scores the
/// oracle action of every unfinished row (plus the word on GEN rows) from
/// its stack top, then advances the batched machine. `depth` defaults to
/// the batch maximum of the per-sentence bounds.
pub fn batch_loss<B: Backend>(net: &Net<B>, batch: &[&Encoded], depth: Option<usize>) -> Result<LossOutput<B>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let bk = net.bk;
    let cfg = net.cfg;
    let depth = depth.unwrap_or_else(|| batch.iter().map(|e| e.depth).max().unwrap_or(1));
    let mut st = init_batch(bk, batch.len(), depth, cfg.stack_dims(), net.initial_state()?)?;
    let tokens: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let steps = batch.iter().map(|e| e.actions.len()).max().unwrap_or(0);
    let mut per_sentence = vec![0.0; batch.len()];
    let mut terms: Vec<B::Tensor> = Vec::new();
    let mut n_actions = 0;

    for t in 0..steps {
        let rows: Vec<usize> = (0..batch.len()).filter(|&i| t < batch[i].actions.len()).collect();
        let gold: Vec<usize> = rows
            .iter()
            .map(|&i| {
                batch[i].actions[t]
                    .index(cfg.n_nts)
                    .ok_or_else(|| Error::InvalidSequence {
                        step: t,
                        msg: "PAD inside an oracle sequence".into(),
                    })
            })
            .collect::<Result<_>>()?;
        let m = net.mlp(&st.top_hidden(bk, &rows)?)?;
        let lp = bk.log_softmax(&net.action_logits(&m)?)?;
        let picked = bk.select(&lp, &(0..rows.len()).collect::<Vec<_>>(), Some(&gold))?;
        for (&i, v) in rows.iter().zip(bk.value(&picked).data()) {
            per_sentence[i] -= v.as_f64();
        }
        terms.push(bk.sum(&picked)?);

        let gen: Vec<usize> = (0..rows.len()).filter(|&k| batch[rows[k]].actions[t].is_gen()).collect();
        if !gen.is_empty() {
            let words: Vec<usize> = gen
                .iter()
                .map(|&k| {
                    let i = rows[k];
                    match batch[i].actions[t] {
                        Action::Gen(w) => w as usize,
                        _ => unreachable!(),
                    }
                })
                .collect();
            let mg = bk.select(&m, &gen, None)?;
            let lw = bk.log_softmax(&net.word_logits(&mg)?)?;
            let pw = bk.select(&lw, &(0..gen.len()).collect::<Vec<_>>(), Some(&words))?;
            for (&k, v) in gen.iter().zip(bk.value(&pw).data()) {
                per_sentence[rows[k]] -= v.as_f64();
            }
            terms.push(bk.sum(&pw)?);
        }
        n_actions += rows.len();

        let actions: Vec<Action> = (0..batch.len())
            .map(|i| batch[i].actions.get(t).cloned().unwrap_or(Action::Pad))
            .collect();
        apply_step(bk, &mut st, &actions, &tokens, net)?;
        if cfg!(debug_assertions) {
            let lens: Vec<usize> = batch.iter().map(|e| e.tokens.len()).collect();
            st.validate(Some(&lens))?;
        }
    }
    let mut total = terms[0].clone();
    for term in &terms[1..] {
        total = bk.add(&total, term)?;
    }
    Ok(LossOutput {
        total: bk.scale(&total, -1.0)?,
        per_sentence,
        n_actions,
    })
}

/// Checks that an action sequence is legal under the inference mask.
pub fn check_legal<B: Backend>(net: &Net<B>, e: &Encoded, depth: usize, max_open_nt: usize) -> Result<()> {
    let bk = net.bk;
    let mut st = init_batch(bk, 1, depth, net.cfg.stack_dims(), net.initial_state()?)?;
    let n_nt = net.cfg.n_nts;
    for (t, a) in e.actions.iter().enumerate() {
        let mask = valid_actions(&st, &[e.tokens.len()], max_open_nt, n_nt);
        let idx = a.index(n_nt).ok_or_else(|| Error::InvalidSequence {
            step: t,
            msg: "PAD".into(),
        })?;
        if !mask[idx] {
            return Err(Error::IllegalAction {
                row: 0,
                action: a.to_string(),
                msg: format!("masked at step {t}"),
            });
        }
        apply_step(bk, &mut st, std::slice::from_ref(a), &[&e.tokens], net)?;
    }
    Ok(())
}
