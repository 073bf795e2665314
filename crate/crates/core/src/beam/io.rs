use rnng_tensor::Backend;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::{region_score, token_increments};
use super::search::{batched_beam, BeamConfig, BeamResult};
use crate::error::{Error, Result};
use crate::model::Net;
use crate::treebank::{bpe_apply, replay, unit_owners, Action, Merges, Tree, Vocab, UNK, WORD_START};

/// A sentence as model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub ids: Vec<u32>,
    /// Terminal strings as generated: the tokens, or their subword units.
    pub units: Vec<String>,
    /// Token index of each unit.
    pub owners: Vec<usize>,
}

/// Maps tokens to ids, segmenting them first when `merges` is given.
pub fn prepare<S: AsRef<str>>(vocab: &Vocab, merges: Option<&Merges>, tokens: &[S]) -> Prepared {
    match merges {
        None => Prepared {
            ids: vocab.encode_tokens(tokens),
            units: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            owners: (0..tokens.len()).collect(),
        },
        Some(m) => {
            let units: Vec<String> = tokens.iter().flat_map(|t| bpe_apply(t.as_ref(), m)).collect();
            let unk = vocab.words.id(UNK).expect("vocabulary always contains UNK");
            Prepared {
                ids: units.iter().map(|u| vocab.words.id(u).unwrap_or(unk)).collect(),
                owners: unit_owners(&units),
                units,
            }
        }
    }
}

/// Rewrites a derivation over subword units into one over tokens:
/// continuation units join the preceding token and constituents left
/// without terminals disappear.
pub fn merge_subword_actions(actions: &[Action<String>]) -> Vec<Action<String>> {
    let mut out: Vec<Action<String>> = Vec::new();
    // Per open constituent: output index of its NT and whether it has content.
    let mut open: Vec<(usize, bool)> = Vec::new();
    let mut last_gen: Option<usize> = None;
    for a in actions {
        match a {
            Action::Nt(_) => {
                open.push((out.len(), false));
                out.push(a.clone());
            }
            Action::Gen(u) => match (u.strip_prefix(WORD_START), last_gen) {
                (None, Some(g)) => {
                    if let Action::Gen(w) = &mut out[g] {
                        w.push_str(u);
                    }
                }
                (stripped, _) => {
                    last_gen = Some(out.len());
                    out.push(Action::Gen(stripped.unwrap_or(u).to_string()));
                    if let Some(top) = open.last_mut() {
                        top.1 = true;
                    }
                }
            },
            Action::Reduce => {
                let (at, filled) = open.pop().unwrap_or((usize::MAX, false));
                if filled {
                    out.push(Action::Reduce);
                    if let Some(top) = open.last_mut() {
                        top.1 = true;
                    }
                } else if at != usize::MAX {
                    out.remove(at);
                    if let Some(g) = last_gen.filter(|&g| g > at) {
                        last_gen = Some(g - 1);
                    }
                }
            }
            Action::Pad => {}
        }
    }
    out
}

/// A parsed sentence with token-level scores.
#[derive(Clone, Debug)]
pub struct Parsed {
    /// Best tree over the original tokens.
    pub tree: Tree,
    pub result: BeamResult,
    /// Log prefix probability after each original token.
    pub prefix_logp: Vec<f64>,
    /// Summed unit increments per original token.
    pub token_logp: Vec<f64>,
}

/// Beam-parses tokenized sentences.
pub fn parse_sentences<B: Backend, S: AsRef<str>>(
    net: &Net<B>,
    vocab: &Vocab,
    merges: Option<&Merges>,
    sentences: &[Vec<S>],
    cfg: &BeamConfig,
    batch_size: usize,
) -> Result<Vec<Parsed>> {
    let prepared: Vec<Prepared> = sentences.iter().map(|s| prepare(vocab, merges, s)).collect();
    let ids: Vec<Vec<u32>> = prepared.iter().map(|p| p.ids.clone()).collect();
    let results = batched_beam(net, &ids, cfg, batch_size)?;
    prepared
        .iter()
        .zip(results)
        .map(|(p, result)| {
            let mut actions = vocab.decode_actions(&result.actions, Some(&p.units));
            if merges.is_some() {
                actions = merge_subword_actions(&actions);
            }
            let token_logp = token_increments(&result.prefix_logp, &p.owners)?;
            let prefix_logp = token_logp
                .iter()
                .scan(0.0, |acc, v| {
                    *acc += v;
                    Some(*acc)
                })
                .collect();
            Ok(Parsed {
                tree: replay(&actions)?,
                result,
                prefix_logp,
                token_logp,
            })
        })
        .collect()
}

/// One line of parse output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseRecord {
    pub id: Value,
    pub tree: String,
    pub logp: f64,
    pub prefix_logp: Vec<f64>,
    pub surprisal: Vec<f64>,
}

impl ParseRecord {
    /// Surprisal in nats, or in bits with `bits`.
    pub fn new(id: Value, parsed: &Parsed, bits: bool) -> Self {
        let unit = if bits { std::f64::consts::LN_2 } else { 1.0 };
        Self {
            id,
            tree: parsed.tree.to_string(),
            logp: parsed.result.log_joint,
            prefix_logp: parsed.prefix_logp.clone(),
            surprisal: parsed.token_logp.iter().map(|v| -v / unit).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSide {
    pub tokens: Vec<String>,
    /// Half-open token range compared between the two sentences.
    pub critical: [usize; 2],
}

/// A minimal pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub id: Value,
    pub good: PairSide,
    pub bad: PairSide,
}

/// Reads a JSON-lines suite; blank lines are skipped.
pub fn read_suite(text: &str) -> Result<Vec<SuiteItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("suite line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairResult {
    pub id: Value,
    /// Critical-region log-probabilities.
    pub good: f64,
    pub bad: f64,
    /// Strictly higher for the good sentence; ties are wrong.
    pub correct: bool,
}

/// Scores every pair on its critical region and returns the per-item
/// outcomes with the accuracy.
pub fn pairs_eval<B: Backend>(
    net: &Net<B>,
    vocab: &Vocab,
    merges: Option<&Merges>,
    items: &[SuiteItem],
    cfg: &BeamConfig,
    batch_size: usize,
) -> Result<(Vec<PairResult>, f64)> {
    if items.is_empty() {
        return Err(Error::Empty("suite"));
    }
    for it in items {
        for side in [&it.good, &it.bad] {
            let [i, j] = side.critical;
            if i >= j || j > side.tokens.len() {
                return Err(Error::Data(format!("item {}: critical region [{i}, {j}) is malformed", it.id)));
            }
        }
    }
    let sentences: Vec<Vec<String>> = items.iter().flat_map(|it| [it.good.tokens.clone(), it.bad.tokens.clone()]).collect();
    let parsed = parse_sentences(net, vocab, merges, &sentences, cfg, batch_size)?;
    let mut out = Vec::with_capacity(items.len());
    for (it, pair) in items.iter().zip(parsed.chunks(2)) {
        let good = region_score(&pair[0].token_logp, it.good.critical)?;
        let bad = region_score(&pair[1].token_logp, it.bad.critical)?;
        out.push(PairResult {
            id: it.id.clone(),
            good,
            bad,
            correct: good > bad,
        });
    }
    let acc = out.iter().filter(|r| r.correct).count() as f64 / out.len() as f64;
    Ok((out, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(s: &str) -> Action<String> {
        Action::Gen(s.to_string())
    }

    #[test]
    fn continuation_units_join_their_token() {
        let nt = |s: &str| Action::Nt(s.to_string());
        // (S (A ▁ab) (B c) ▁d) where "c" continues "▁ab".
        let acts = vec![
            nt("S"),
            nt("A"),
            gen("▁ab"),
            Action::Reduce,
            nt("B"),
            gen("c"),
            Action::Reduce,
            gen("▁d"),
            Action::Reduce,
        ];
        let merged = merge_subword_actions(&acts);
        assert_eq!(replay(&merged).unwrap().to_string(), "(S (A abc) d)");
    }

    #[test]
    fn suite_lines_parse() {
        let line = r#"{"id": 3, "good": {"tokens": ["a", "b"], "critical": [1, 2]}, "bad": {"tokens": ["a", "c"], "critical": [1, 2]}}"#;
        let items = read_suite(&format!("{line}\n\n")).unwrap();
        assert_eq!(items[0].good.critical, [1, 2]);
        assert!(read_suite("{").is_err());
    }
}
