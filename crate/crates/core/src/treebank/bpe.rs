use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::treebank::tree::Tree;

/// Prefix carried by the first unit of every token.
pub const WORD_START: char = '▁';

/// Ordered byte-pair merge rules.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Merges {
    rules: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl Merges {
    pub fn new(rules: Vec<(String, String)>) -> Self {
        let ranks = rules.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();
        Self { rules, ranks }
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// One `left right` pair per line, in application order.
    pub fn to_text(&self) -> String {
        self.rules.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => rules.push((a.to_string(), b.to_string())),
                _ => return Err(Error::Data(format!("merges line {}: expected two units", n + 1))),
            }
        }
        Ok(Self::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn initial_units(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { format!("{WORD_START}{c}") } else { c.to_string() })
        .collect()
}

/// Learns merges greedily: the most frequent adjacent pair wins, ties go
/// to the lexicographically smallest pair. Stops once the unit inventory
/// (base alphabet plus one unit per merge) reaches `target_units` or no
/// pair remains.
pub fn bpe_train<'a>(tokens: impl IntoIterator<Item = &'a str>, target_units: usize) -> Result<Merges> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut words: Vec<(Vec<String>, u64)> = counts.into_iter().map(|(w, c)| (initial_units(w), c)).collect();
    let alphabet: BTreeSet<&String> = words.iter().flat_map(|(u, _)| u.iter()).collect();
    if target_units < alphabet.len() {
        return Err(Error::Config(format!(
            "target of {target_units} units is below the alphabet size {}",
            alphabet.len()
        )));
    }
    let mut units = alphabet.len();
    let mut rules = Vec::new();
    while units < target_units {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (u, c) in &words {
            for w in u.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let Some(best) = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()))
        else {
            break;
        };
        for (u, _) in &mut words {
            merge_all(u, &best.0, &best.1);
        }
        rules.push(best);
        units += 1;
    }
    Ok(Merges::new(rules))
}

fn merge_all(units: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < units.len() {
        if units[i] == a && units[i + 1] == b {
            let right = units.remove(i + 1);
            units[i].push_str(&right);
        }
        i += 1;
    }
}

/// Segments one token by replaying merges, lowest rank first. The first
/// unit keeps the [`WORD_START`] prefix.
pub fn bpe_apply(word: &str, merges: &Merges) -> Vec<String> {
    let mut units = initial_units(word);
    loop {
        let best = units
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| merges.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
            .min();
        let Some((_, i)) = best else { break };
        let right = units.remove(i + 1);
        units[i].push_str(&right);
    }
    units
}

/// Replaces every terminal by its subword units in place.
pub fn segment_tree(tree: &Tree, merges: &Merges) -> Tree {
    tree.map_leaves(&mut |w| bpe_apply(w, merges))
}

/// Joins marked subword units back into tokens.
pub fn reassemble<S: AsRef<str>>(units: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for u in units {
        let u = u.as_ref();
        match u.strip_prefix(WORD_START) {
            Some(rest) => out.push(rest.to_string()),
            None => match out.last_mut() {
                Some(last) => last.push_str(u),
                None => out.push(u.to_string()),
            },
        }
    }
    out
}

/// Index of the original token each unit belongs to.
pub fn unit_owners<S: AsRef<str>>(units: &[S]) -> Vec<usize> {
    let mut owner = 0usize;
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            if i > 0 && u.as_ref().starts_with(WORD_START) {
                owner += 1;
            }
            owner
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::tree::parse_tree;

    fn strip(units: &[String]) -> Vec<String> {
        units.iter().map(|u| u.trim_start_matches(WORD_START).to_string()).collect()
    }

    #[test]
    fn one_merge_by_hand_count() {
        let m = bpe_train("aa aa ab".split(' '), 4).unwrap();
        assert_eq!(m.rules(), [("▁a".to_string(), "a".to_string())]);
        assert_eq!(strip(&bpe_apply("aab", &m)), ["aa", "b"]);
    }

    #[test]
    fn alphabet_sized_target_is_character_level() {
        let m = bpe_train("ab ba".split(' '), 4).unwrap();
        assert!(m.is_empty());
        assert_eq!(bpe_apply("abba", &m), ["▁a", "b", "b", "a"]);
        assert!(bpe_train("ab ba".split(' '), 3).is_err());
    }

    #[test]
    fn lossless_on_corpus() {
        let text = "the curry was curried by the currier in a hurry";
        let m = bpe_train(text.split(' '), 20).unwrap();
        for w in text.split(' ') {
            assert_eq!(strip(&bpe_apply(w, &m)).concat(), w);
        }
    }

    #[test]
    fn segment_and_reassemble() {
        let m = Merges::new(vec![
            ("▁c".into(), "u".into()),
            ("r".into(), "y".into()),
        ]);
        let t = parse_tree("(NP curry)").unwrap();
        let s = segment_tree(&t, &m);
        assert_eq!(s.to_string(), "(NP ▁cu r ry)");
        assert_eq!(reassemble(&s.leaves()), ["curry"]);
        assert_eq!(unit_owners(&["▁a", "b", "▁c"]), [0, 0, 1]);
    }

    #[test]
    fn merges_text_round_trip() {
        let m = bpe_train("low lower lowest".split(' '), 14).unwrap();
        assert_eq!(Merges::from_text(&m.to_text()).unwrap(), m);
    }
}
