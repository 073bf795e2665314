//! Numerical self-checks shared by the test suite and the `selfcheck`
//! command: batched against unbatched scoring, analytic against numeric
//! gradients, and beam search against exhaustive enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnng_tensor::{Backend, Eager, Scalar, Tape};

use crate::beam::{enumerate, word_sync_beam, BeamConfig};
use crate::error::{Error, Result};
use crate::model::reference::reference_nll;
use crate::model::{batch_loss, Encoded, Model, ModelConfig};

/// Worst discrepancy found by a check, with where it happened.
#[derive(Clone, Debug)]
pub struct Discrepancy {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

impl Discrepancy {
    fn new() -> Self {
        Self {
            worst: 0.0,
            at: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        // NaN must count as a failure.
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.at = at();
        }
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Relative error between the batched loss and the reference
/// implementation, per sentence and for the corpus total.
pub fn batched_vs_reference<T: Scalar>(model: &Model<T>, corpus: &[Encoded], batch_size: usize) -> Result<Discrepancy> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let bk = Eager::<T>::new();
    let mut d = Discrepancy::new();
    let net = model.net(&bk, false, 0);
    let (mut batched, mut reference) = (0.0, 0.0);
    for (c, chunk) in corpus.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let out = batch_loss(&net, &refs, None)?;
        batched += bk.value(&out.total).item()?.as_f64();
        for (i, (e, got)) in chunk.iter().zip(&out.per_sentence).enumerate() {
            let want = reference_nll(&bk, &model.cfg, &net.p, e)?;
            reference += want;
            d.record(rel(*got, want, 1e-12), || format!("sentence {}", c * batch_size + i));
        }
    }
    d.record(rel(batched, reference, 1e-12), || "corpus total".into());
    Ok(d)
}

/// A model with every entry, biases and initial state included, uniform
/// in `[-scale, scale]`. Fresh initialisation leaves ReLU inputs at exactly
/// zero, where finite differences straddle the kink; a dense random point
/// avoids that almost surely.
pub fn dense_random(cfg: ModelConfig, seed: u64, scale: f64) -> Result<Model<f64>> {
    let mut model = Model::<f64>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, a) in model.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
    Ok(model)
}

/// Compares every gradient entry of the summed loss over `corpus` with a
/// fourth-order central difference of step `h`. Errors are relative, with `floor`
/// guarding entries whose true gradient is zero.
pub fn gradient_check(model: &Model<f64>, corpus: &[Encoded], h: f64, floor: f64) -> Result<Discrepancy> {
    let refs: Vec<&Encoded> = corpus.iter().collect();
    let tape = Tape::<f64>::new();
    let grads = {
        let net = model.net(&tape, false, 0);
        tape.backward(batch_loss(&net, &refs, None)?.total)?
    };
    let loss = |m: &Model<f64>| -> Result<f64> {
        let bk = Eager::<f64>::new();
        let net = m.net(&bk, false, 0);
        Ok(bk.value(&batch_loss(&net, &refs, None)?.total).item()?)
    };
    let mut probe = model.clone();
    let mut d = Discrepancy::new();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads.get(&name).map(|a| a.data().to_vec());
        let base = model.params.get(&name).expect("listed parameter").data().to_vec();
        for (i, &orig) in base.iter().enumerate() {
            let mut at = |v: f64| -> Result<f64> {
                probe.params.get_mut(&name).expect("listed parameter").data_mut()[i] = v;
                loss(&probe)
            };
            let (u1, u2) = (at(orig + h)?, at(orig + 2.0 * h)?);
            let (d1, d2) = (at(orig - h)?, at(orig - 2.0 * h)?);
            probe.params.get_mut(&name).expect("listed parameter").data_mut()[i] = orig;
            let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h);
            let analytic = g.as_ref().map_or(0.0, |g| g[i]);
            d.record(rel(analytic, numeric, floor), || format!("{name}[{i}]: {analytic:e} vs {numeric:e}"));
        }
    }
    Ok(d)
}

/// Outcome of comparing beam search with enumeration.
#[derive(Clone, Debug)]
pub struct BeamAgreement {
    /// Sentences whose best derivation differs.
    pub tree_mismatches: usize,
    /// Largest absolute gap in best score or any prefix log-probability.
    pub score: Discrepancy,
}

/// Runs beam search and exhaustive enumeration on each sentence.
pub fn beam_vs_enumeration(model: &Model<f64>, sentences: &[Vec<u32>], cfg: &BeamConfig) -> Result<BeamAgreement> {
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let mut out = BeamAgreement {
        tree_mismatches: 0,
        score: Discrepancy::new(),
    };
    for (s, toks) in sentences.iter().enumerate() {
        let ex = enumerate(&bk, &model.cfg, &net.p, toks, cfg.depth, 5_000_000)?;
        let got = word_sync_beam(&net, toks, cfg)?;
        if got.actions != ex.best_actions {
            out.tree_mismatches += 1;
        }
        out.score.record((got.log_joint - ex.best_logp).abs(), || format!("sentence {s} best score"));
        for (t, (a, b)) in got.prefix_logp.iter().zip(&ex.prefix_logp).enumerate() {
            out.score.record((a - b).abs(), || format!("sentence {s} prefix {t}"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_corpus;
    use crate::synth::{random_trees, TreeShape};
    use crate::treebank::build_vocab;

    #[test]
    fn tiny_model_passes() {
        let trees = random_trees(1, 2, &TreeShape { max_depth: 3, n_words: 4, ..Default::default() });
        let vocab = build_vocab(&trees, 100).unwrap();
        let mut cfg = ModelConfig::uniform(3, vocab.n_words(), vocab.n_nts());
        cfg.dropout = 0.0;
        cfg.layers = 1;
        let model = dense_random(cfg, 4, 0.5).unwrap();
        let enc = encode_corpus(&vocab, &trees).unwrap();
        let ok = gradient_check(&model, &enc, 1e-4, 1e-6).unwrap();
        assert!(ok.worst < 1e-3, "{ok:?}");
        assert!(batched_vs_reference(&model, &enc, 2).unwrap().worst < 1e-9);
    }
}
