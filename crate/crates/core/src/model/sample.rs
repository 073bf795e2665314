use rand::Rng;
use rnng_tensor::Backend;

use crate::error::{Error, Result};
use crate::model::Net;
use crate::stack::{apply_step, init_batch, BatchState};
use crate::treebank::{replay, Action, Tree, Vocab};

#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub max_actions: usize,
    /// 0 selects the arg max (lowest index on ties).
    pub temperature: f64,
    pub max_open_nt: usize,
    pub depth: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            max_actions: 1000,
            temperature: 1.0,
            max_open_nt: 100,
            depth: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub actions: Vec<Action>,
    pub tokens: Vec<u32>,
    /// Log joint probability of the derivation under the model's action
    /// and word distributions, the quantity teacher forcing scores.
    pub log_prob: f64,
}

impl Sample {
    pub fn tree(&self, vocab: &Vocab) -> Result<Tree> {
        replay(&vocab.decode_actions(&self.actions, None))
    }
}

fn legal<B: Backend>(st: &BatchState<B>, n_nt: usize, cfg: &SampleConfig) -> Vec<bool> {
    let mut out = vec![false; n_nt + 2];
    if st.finished[0] {
        return out;
    }
    let open = st.open_nts(0);
    let ph = st.p_h[0];
    if open < cfg.max_open_nt && ph + 1 < cfg.depth {
        out[..n_nt].iter_mut().for_each(|v| *v = true);
    }
    out[n_nt] = open > 0 && ph < cfg.depth;
    out[n_nt + 1] = st.last_open(0).is_some_and(|l| l != ph);
    out
}

/// Index drawn from `logp` restricted to `allowed`, after temperature
/// scaling and renormalisation.
fn draw<R: Rng + ?Sized>(logp: &[f64], allowed: &[bool], temperature: f64, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = (0..logp.len()).filter(|&i| allowed[i]).collect();
    if candidates.is_empty() {
        return None;
    }
    if temperature == 0.0 {
        return candidates
            .iter()
            .copied()
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logp[b] >= logp[i] => Some(b),
                _ => Some(i),
            });
    }
    let top = candidates.iter().map(|&i| logp[i] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|&i| (logp[i] / temperature - top).exp()).collect();
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (&i, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    candidates.last().copied()
}

/// Ancestral sampling of a tree and its sentence.
pub fn sample<B: Backend, R: Rng + ?Sized>(net: &Net<B>, rng: &mut R, cfg: &SampleConfig) -> Result<Sample> {
    if cfg.temperature < 0.0 {
        return Err(Error::Config(format!("temperature {} is negative", cfg.temperature)));
    }
    let bk = net.bk;
    let n_nt = net.cfg.n_nts;
    let mut st = init_batch(bk, 1, cfg.depth, net.cfg.stack_dims(), net.initial_state()?)?;
    let mut out = Sample {
        actions: Vec::new(),
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while !st.finished[0] {
        if out.actions.len() >= cfg.max_actions {
            return Err(Error::SampleExhausted(cfg.max_actions));
        }
        let m = net.mlp(&st.top_hidden(bk, &[0])?)?;
        let lp = bk.value(&bk.log_softmax(&net.action_logits(&m)?)?).to_f64_vec();
        let mask = legal(&st, n_nt, cfg);
        let idx = draw(&lp, &mask, cfg.temperature, rng).ok_or(Error::SampleExhausted(out.actions.len()))?;
        out.log_prob += lp[idx];
        let action = if idx == n_nt {
            let lw = bk.value(&bk.log_softmax(&net.word_logits(&m)?)?).to_f64_vec();
            let w = draw(&lw, &vec![true; lw.len()], cfg.temperature, rng).expect("vocabulary is non-empty");
            out.log_prob += lw[w];
            out.tokens.push(w as u32);
            Action::Gen(w as u32)
        } else {
            Action::from_index(idx, n_nt, 0)
        };
        apply_step(bk, &mut st, std::slice::from_ref(&action), &[&out.tokens], net)?;
        out.actions.push(action);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_breaks_ties_by_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw(&[0.0, 1.0, 1.0], &[true; 3], 0.0, &mut rng), Some(1));
        assert_eq!(draw(&[0.0, 1.0, 1.0], &[true, false, true], 0.0, &mut rng), Some(2));
        assert_eq!(draw(&[0.0], &[false], 1.0, &mut rng), None);
    }

    #[test]
    fn masked_draws_stay_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let i = draw(&[-1.0, -0.1, -3.0], &[true, false, true], 1.0, &mut rng).unwrap();
            assert_ne!(i, 1);
        }
    }
}
