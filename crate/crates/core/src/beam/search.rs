use rnng_tensor::{Backend, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Net;
use crate::stack::{apply_step, init_batch, valid_actions, BatchState, Reach};
use crate::treebank::Action;

/// Beam widths and caps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    /// Action beam: successors kept per round.
    pub k: usize,
    /// Word beam: hypotheses carried to the next word.
    pub k_w: usize,
    /// Fast-track: best GEN successors admitted regardless of rank.
    pub k_s: usize,
    /// Tokens per batch of sentences.
    pub token_cap: usize,
    /// Expansion rounds allowed between two words.
    pub max_structural: usize,
    /// Stack depth bound.
    pub depth: usize,
}

impl BeamConfig {
    /// `k_w = k/10`, `k_s = k/100`, both at least 1.
    pub fn with_schedule(k: usize) -> Self {
        Self {
            k,
            k_w: (k / 10).max(1),
            k_s: (k / 100).max(1),
            token_cap: 250,
            max_structural: 40,
            depth: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_w == 0 || self.k < self.k_w {
            return Err(Error::Config(format!("need k >= k_w >= 1, got k={} k_w={}", self.k, self.k_w)));
        }
        if self.token_cap == 0 || self.max_structural == 0 || self.depth < 2 {
            return Err(Error::Config("token cap, structural cap and depth must be positive".into()));
        }
        Ok(())
    }
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self::with_schedule(100)
    }
}

/// Search output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Actions of the best complete hypothesis.
    pub actions: Vec<Action>,
    /// Its log joint probability.
    pub log_joint: f64,
    /// Log prefix probability after each token.
    pub prefix_logp: Vec<f64>,
    /// Negative log increments of the prefix probability, in nats.
    pub surprisal: Vec<f64>,
}

const ROOT: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
struct Hyp {
    sent: usize,
    score: f64,
    /// Last history node; [`ROOT`] before the first action.
    node: usize,
}

/// Backpointers shared by every hypothesis of a batch.
#[derive(Default)]
struct Arena(Vec<(usize, Action)>);

impl Arena {
    fn push(&mut self, parent: usize, a: Action) -> usize {
        self.0.push((parent, a));
        self.0.len() - 1
    }

    fn actions(&self, mut node: usize) -> Vec<Action> {
        let mut out = Vec::new();
        while node != ROOT {
            let (parent, a) = self.0[node];
            out.push(a);
            node = parent;
        }
        out.reverse();
        out
    }
}

/// Higher score first, then earlier row, then lower action index.
fn rank(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn values<B: Backend>(bk: &B, t: &B::Tensor) -> Vec<f64> {
    bk.value(t).data().iter().map(|v| v.as_f64()).collect()
}

/// Word-synchronous beam search over one sentence.
pub fn word_sync_beam<B: Backend>(net: &Net<B>, tokens: &[u32], cfg: &BeamConfig) -> Result<BeamResult> {
    Ok(beam_batch(net, &[tokens], cfg, 0)?.pop().expect("one sentence in, one result out"))
}

/// Splits sentences, in order, into runs of at most `batch_size` sentences
/// and `token_cap` tokens; a sentence above the cap runs alone.
pub fn group_sentences(lens: &[usize], batch_size: usize, token_cap: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let (mut start, mut tokens) = (0, 0);
    for (i, &n) in lens.iter().enumerate() {
        if i > start && (i - start >= batch_size || tokens + n > token_cap) {
            out.push(start..i);
            start = i;
            tokens = 0;
        }
        tokens += n;
    }
    if start < lens.len() {
        out.push(start..lens.len());
    }
    out
}

/// Beam search over many sentences, `batch_size` at a time under the
/// token cap. Results do not depend on the grouping.
pub fn batched_beam<B: Backend>(net: &Net<B>, sentences: &[Vec<u32>], cfg: &BeamConfig, batch_size: usize) -> Result<Vec<BeamResult>> {
    cfg.validate()?;
    let lens: Vec<usize> = sentences.iter().map(Vec::len).collect();
    let mut out = Vec::with_capacity(sentences.len());
    for range in group_sentences(&lens, batch_size.max(1), cfg.token_cap) {
        let batch: Vec<&[u32]> = sentences[range.clone()].iter().map(Vec::as_slice).collect();
        out.extend(beam_batch(net, &batch, cfg, range.start)?);
    }
    Ok(out)
}

/// Hypotheses of one phase: a state and one [`Hyp`] per row, rows grouped
/// by sentence in rank order.
struct Beam<B: Backend> {
    st: BatchState<B>,
    hyps: Vec<Hyp>,
}

/// Searches a batch of sentences together. Every live hypothesis of every
/// sentence is one row of a shared state; `first_id` offsets sentence
/// numbers in errors.
pub fn beam_batch<B: Backend>(net: &Net<B>, sentences: &[&[u32]], cfg: &BeamConfig, first_id: usize) -> Result<Vec<BeamResult>> {
    cfg.validate()?;
    if let Some(s) = sentences.iter().position(|s| s.is_empty()) {
        return Err(Error::Data(format!("sentence {} is empty", first_id + s)));
    }
    let bk = net.bk;
    let n = sentences.len();
    let lens: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
    let mut arena = Arena::default();
    let reach = Reach::new(cfg.depth, net.cfg.max_open_nt);
    let mut prefix: Vec<Vec<f64>> = vec![Vec::new(); n];

    let mut word = Beam {
        st: init_batch(bk, n, cfg.depth, net.cfg.stack_dims(), net.initial_state()?)?,
        hyps: (0..n).map(|s| Hyp { sent: s, score: 0.0, node: ROOT }).collect(),
    };
    // Word beams of sentences whose last token has been generated.
    let mut done: Vec<Beam<B>> = Vec::new();
    let max_len = lens.iter().copied().max().unwrap_or(0);
    for t in 0..max_len {
        let (active, finished): (Vec<usize>, Vec<usize>) = (0..word.hyps.len()).partition(|&r| lens[word.hyps[r].sent] > t);
        if !finished.is_empty() {
            done.push(Beam {
                st: word.st.gather_rows(bk, &finished)?,
                hyps: finished.iter().map(|&r| word.hyps[r]).collect(),
            });
        }
        if active.is_empty() {
            break;
        }
        let frontier = Beam {
            st: word.st.gather_rows(bk, &active)?,
            hyps: active.iter().map(|&r| word.hyps[r]).collect(),
        };
        word = advance_word(net, sentences, &lens, frontier, t, cfg, &reach, &mut arena, &mut prefix, first_id)?;
    }
    done.push(word);

    let parts: Vec<(&BatchState<B>, Vec<usize>)> = done.iter().map(|b| (&b.st, (0..b.hyps.len()).collect())).collect();
    let refs: Vec<(&BatchState<B>, &[usize])> = parts.iter().map(|(s, r)| (*s, r.as_slice())).collect();
    let st = BatchState::concat(bk, &refs)?;
    let hyps: Vec<Hyp> = done.into_iter().flat_map(|b| b.hyps).collect();
    let complete = finish(net, sentences, &lens, Beam { st, hyps }, &mut arena)?;

    let mut results: Vec<Option<BeamResult>> = vec![None; n];
    for h in complete {
        let better = results[h.sent].as_ref().is_none_or(|r| h.score > r.log_joint);
        if better {
            let p = &prefix[h.sent];
            let surprisal = p.iter().enumerate().map(|(i, &v)| if i == 0 { -v } else { p[i - 1] - v }).collect();
            results[h.sent] = Some(BeamResult {
                actions: arena.actions(h.node),
                log_joint: h.score,
                prefix_logp: p.clone(),
                surprisal,
            });
        }
    }
    results
        .into_iter()
        .enumerate()
        .map(|(s, r)| r.ok_or(Error::BeamExhausted { sentence: first_id + s, token: lens[s] }))
        .collect()
}

/// Expands `frontier` (all hypotheses having consumed `t` tokens) until
/// the completion buffers fill; returns the next word beam.
#[allow(clippy::too_many_arguments)]
fn advance_word<B: Backend>(
    net: &Net<B>,
    sentences: &[&[u32]],
    lens: &[usize],
    frontier: Beam<B>,
    t: usize,
    cfg: &BeamConfig,
    reach: &Reach,
    arena: &mut Arena,
    prefix: &mut [Vec<f64>],
    first_id: usize,
) -> Result<Beam<B>> {
    let bk = net.bk;
    let n_nt = net.cfg.n_nts;
    let width = n_nt + 2;
    let n = sentences.len();
    let live: Vec<usize> = {
        let mut v: Vec<usize> = frontier.hyps.iter().map(|h| h.sent).collect();
        v.dedup();
        v
    };
    // Completion buffer: states produced by each round and, per sentence,
    // (chunk, row, hyp) in insertion order.
    let mut chunks: Vec<BatchState<B>> = Vec::new();
    let mut buffer: Vec<Vec<(usize, usize, Hyp)>> = vec![Vec::new(); n];
    let mut rounds = 0;
    // The frontier is a selection of rows of the word beam state, then of
    // the newest chunk; `src_lens` are the sentence lengths of that state.
    let base = frontier.st;
    let mut hyps = frontier.hyps;
    let mut rows_of: Vec<usize> = (0..hyps.len()).collect();
    let mut src_lens: Vec<usize> = hyps.iter().map(|h| lens[h.sent]).collect();

    while !hyps.is_empty() && rounds < cfg.max_structural {
        rounds += 1;
        let src = chunks.last().unwrap_or(&base);
        let rows = hyps.len();
        let m = net.mlp(&src.top_hidden(bk, &rows_of)?)?;
        let alp = values(bk, &bk.log_softmax(&net.action_logits(&m)?)?);
        let next_tok: Vec<usize> = hyps.iter().map(|h| sentences[h.sent][t] as usize).collect();
        let all: Vec<usize> = (0..rows).collect();
        let wlp = values(bk, &bk.select(&bk.log_softmax(&net.word_logits(&m)?)?, &all, Some(&next_tok))?);
        let mut mask = valid_actions(src, &src_lens, net.cfg.max_open_nt, n_nt);
        reach.prune(src, &src_lens, n_nt, &mut mask);

        let mut parents = Vec::new();
        let mut acts = Vec::new();
        let mut new_hyps = Vec::new();
        let mut start = 0;
        while start < rows {
            let sent = hyps[start].sent;
            let end = (start..rows).find(|&r| hyps[r].sent != sent).unwrap_or(rows);
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for r in start..end {
                let legal = &mask[rows_of[r] * width..(rows_of[r] + 1) * width];
                for a in (0..width).filter(|&a| legal[a]) {
                    let extra = if a == n_nt { wlp[r] } else { 0.0 };
                    cands.push((hyps[r].score + alp[r * width + a] + extra, r, a));
                }
            }
            cands.sort_by(rank);
            let top = cands.len().min(cfg.k);
            let fast: Vec<(f64, usize, usize)> = cands[top..].iter().filter(|c| c.2 == n_nt).take(cfg.k_s).copied().collect();
            // The k_s best GEN successors overall; those inside the top-k
            // are admitted anyway.
            let gens_in_top = cands[..top].iter().filter(|c| c.2 == n_nt).count();
            let fast = &fast[..fast.len().min(cfg.k_s.saturating_sub(gens_in_top))];
            for &(score, r, a) in cands[..top].iter().chain(fast) {
                let action = Action::from_index(a, n_nt, sentences[sent][t]);
                parents.push(rows_of[r]);
                acts.push(action);
                new_hyps.push(Hyp {
                    sent,
                    score,
                    node: arena.push(hyps[r].node, action),
                });
            }
            start = end;
        }
        if parents.is_empty() {
            break;
        }
        let mut st = src.gather_rows(bk, &parents)?;
        let toks: Vec<&[u32]> = new_hyps.iter().map(|h| sentences[h.sent]).collect();
        apply_step(bk, &mut st, &acts, &toks, net)?;
        src_lens = new_hyps.iter().map(|h| lens[h.sent]).collect();
        #[cfg(debug_assertions)]
        st.validate(Some(&src_lens))?;

        let chunk = chunks.len();
        let mut keep = Vec::new();
        for (row, (h, a)) in new_hyps.iter().zip(&acts).enumerate() {
            if a.is_gen() {
                buffer[h.sent].push((chunk, row, *h));
            } else {
                keep.push(row);
            }
        }
        // Sentences whose buffer is full stop expanding.
        keep.retain(|&row| buffer[new_hyps[row].sent].len() < cfg.k);
        hyps = keep.iter().map(|&r| new_hyps[r]).collect();
        rows_of = keep;
        chunks.push(st);
    }

    let mut parts: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut hyps = Vec::new();
    for &s in &live {
        let c = &mut buffer[s];
        if c.is_empty() {
            return Err(if rounds >= cfg.max_structural {
                Error::StructuralCap {
                    sentence: first_id + s,
                    token: t,
                    cap: cfg.max_structural,
                }
            } else {
                Error::BeamExhausted { sentence: first_id + s, token: t }
            });
        }
        prefix[s].push(logsumexp(c.iter().map(|e| e.2.score)));
        // Stable sort keeps insertion order among equal scores.
        c.sort_by(|a, b| b.2.score.total_cmp(&a.2.score));
        for &(chunk, row, h) in c.iter().take(cfg.k_w) {
            match parts.last_mut() {
                Some((last, rows)) if *last == chunk => rows.push(row),
                _ => parts.push((chunk, vec![row])),
            }
            hyps.push(h);
        }
    }
    let refs: Vec<(&BatchState<B>, &[usize])> = parts.iter().map(|(c, r)| (&chunks[*c], r.as_slice())).collect();
    Ok(Beam {
        st: BatchState::concat(bk, &refs)?,
        hyps,
    })
}

/// Closes every open nonterminal of every hypothesis with REDUCE.
fn finish<B: Backend>(net: &Net<B>, sentences: &[&[u32]], lens: &[usize], mut beam: Beam<B>, arena: &mut Arena) -> Result<Vec<Hyp>> {
    let bk = net.bk;
    let n_nt = net.cfg.n_nts;
    let width = n_nt + 2;
    let toks: Vec<&[u32]> = beam.hyps.iter().map(|h| sentences[h.sent]).collect();
    let row_lens: Vec<usize> = beam.hyps.iter().map(|h| lens[h.sent]).collect();
    loop {
        let open: Vec<usize> = (0..beam.hyps.len()).filter(|&r| !beam.st.finished[r]).collect();
        if open.is_empty() {
            return Ok(beam.hyps);
        }
        let mask = valid_actions(&beam.st, &row_lens, net.cfg.max_open_nt, n_nt);
        let m = net.mlp(&beam.st.top_hidden(bk, &open)?)?;
        let alp = values(bk, &bk.log_softmax(&net.action_logits(&m)?)?);
        let mut acts = vec![Action::Pad; beam.hyps.len()];
        for (i, &r) in open.iter().enumerate() {
            if !mask[r * width + n_nt + 1] {
                return Err(Error::IllegalAction {
                    row: r,
                    action: "REDUCE".into(),
                    msg: "cannot close the tree after the last token".into(),
                });
            }
            acts[r] = Action::Reduce;
            let h = &mut beam.hyps[r];
            h.score += alp[i * width + n_nt + 1];
            h.node = arena.push(h.node, Action::Reduce);
        }
        apply_step(bk, &mut beam.st, &acts, &toks, net)?;
    }
}
