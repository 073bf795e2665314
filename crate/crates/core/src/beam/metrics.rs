use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::treebank::Tree;

/// Labeled bracket precision, recall and F1, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From matched, predicted and gold bracket counts.
    pub fn from_counts(matched: usize, pred: usize, gold: usize) -> Self {
        let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let (p, r) = (pct(matched, pred), pct(matched, gold));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self { precision: p, recall: r, f1 }
    }
}

/// `(matched, predicted, gold)` labeled brackets, root included and
/// duplicates counted as a multiset.
pub fn bracket_counts(pred: &Tree, gold: &Tree) -> Result<(usize, usize, usize)> {
    if pred.leaves() != gold.leaves() {
        return Err(Error::Data(format!("yield mismatch: {pred} vs {gold}")));
    }
    let (p, g) = (pred.spans(), gold.spans());
    let mut pool: HashMap<&(String, usize, usize), usize> = HashMap::new();
    for s in &g {
        *pool.entry(s).or_default() += 1;
    }
    let matched = p
        .iter()
        .filter(|s| match pool.get_mut(s) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count();
    Ok((matched, p.len(), g.len()))
}

pub fn bracket_f1(pred: &Tree, gold: &Tree) -> Result<Prf> {
    let (m, p, g) = bracket_counts(pred, gold)?;
    Ok(Prf::from_counts(m, p, g))
}

/// Corpus-level F1 from pooled counts.
pub fn corpus_f1<'a>(pairs: impl IntoIterator<Item = (&'a Tree, &'a Tree)>) -> Result<Prf> {
    let (mut m, mut p, mut g) = (0, 0, 0);
    for (pred, gold) in pairs {
        let c = bracket_counts(pred, gold)?;
        m += c.0;
        p += c.1;
        g += c.2;
    }
    Ok(Prf::from_counts(m, p, g))
}

/// Per-token log-probability increments: the increments of all units of
/// a token are summed. `owners[u]` is the token of unit `u`.
pub fn token_increments(unit_prefix_logp: &[f64], owners: &[usize]) -> Result<Vec<f64>> {
    if unit_prefix_logp.len() != owners.len() {
        return Err(Error::Data(format!(
            "{} prefix values for {} units",
            unit_prefix_logp.len(),
            owners.len()
        )));
    }
    let n = owners.last().map_or(0, |&o| o + 1);
    let mut out = vec![0.0; n];
    let mut prev = 0.0;
    for (&p, &o) in unit_prefix_logp.iter().zip(owners) {
        out[o] += p - prev;
        prev = p;
    }
    Ok(out)
}

/// `exp(−Σ log p / n)`.
pub fn perplexity(total_logp: f64, n_tokens: usize) -> Result<f64> {
    if n_tokens == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok((-total_logp / n_tokens as f64).exp())
}

/// Token-level perplexity over sentences given as (unit prefix log-probs,
/// unit owners); the denominator counts original tokens.
pub fn token_ppl(sentences: &[(Vec<f64>, Vec<usize>)]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0);
    for (prefix, owners) in sentences {
        let inc = token_increments(prefix, owners)?;
        total += inc.iter().sum::<f64>();
        tokens += inc.len();
    }
    perplexity(total, tokens)
}

/// Summed log-probability of tokens `region.0 .. region.1`.
pub fn region_score(token_logp: &[f64], region: [usize; 2]) -> Result<f64> {
    let [i, j] = region;
    if i >= j || j > token_logp.len() {
        return Err(Error::Data(format!(
            "critical region [{i}, {j}) does not fit a sentence of {} tokens",
            token_logp.len()
        )));
    }
    Ok(token_logp[i..j].iter().sum())
}
