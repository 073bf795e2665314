use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::treebank::oracle::{oracle_actions, Action};
use crate::treebank::tree::Tree;

/// Generic fallback for unknown words whose signature is itself unseen.
pub const UNK: &str = "UNK";

/// Dense symbol ↔ id map with training counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `symbol` if absent and returns its id.
    pub fn add(&mut self, symbol: &str, count: u64) -> u32 {
        if let Some(&id) = self.ids.get(symbol) {
            self.counts[id as usize] += count;
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol.to_string());
        self.counts.push(count);
        self.ids.insert(symbol.to_string(), id);
        id
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.symbols[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.ids.contains_key(symbol)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// `id<TAB>symbol<TAB>count` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (s, c)) in self.symbols.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{i}\t{s}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut table = SymbolTable::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Data(format!("vocab line {}: expected id<TAB>symbol<TAB>count", n + 1));
            let mut f = line.split('\t');
            let (id, sym, count) = (f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?);
            let id: usize = id.parse().map_err(|_| bad())?;
            let count: u64 = count.parse().map_err(|_| bad())?;
            if id != table.len() || table.contains(sym) {
                return Err(Error::Data(format!("vocab line {}: ids must be dense and symbols unique", n + 1)));
            }
            table.add(sym, count);
        }
        Ok(table)
    }
}

/// Word and nonterminal inventories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub words: SymbolTable,
    pub nts: SymbolTable,
}

/// Keeps the `limit` most frequent word types (ties broken
/// lexicographically) and every nonterminal label. Each dropped token is
/// replaced by its unknown-word signature, which joins the table along with
/// the generic [`UNK`].
pub fn build_vocab(trees: &[Tree], limit: usize) -> Result<Vocab> {
    if trees.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut labels = BTreeSet::new();
    for t in trees {
        for w in t.leaves() {
            *freq.entry(w).or_default() += 1;
        }
        labels.extend(t.labels());
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut words = SymbolTable::new();
    for &(w, c) in ranked.iter().take(limit) {
        words.add(w, c);
    }
    let kept = words.clone();
    let mut sigs: Vec<String> = Vec::new();
    for t in trees {
        for (i, w) in t.leaves().into_iter().enumerate() {
            if !kept.contains(w) {
                sigs.push(unk_signature(w, i == 0, kept.contains(&w.to_lowercase())));
            }
        }
    }
    sigs.sort();
    let mut i = 0;
    while i < sigs.len() {
        let j = sigs[i..].iter().take_while(|s| **s == sigs[i]).count();
        words.add(&sigs[i], j as u64);
        i += j;
    }
    words.add(UNK, 0);

    let mut nts = SymbolTable::new();
    for t in trees {
        for l in t.labels() {
            nts.add(l, 1);
        }
    }
    // Re-add in sorted order so ids do not depend on corpus order.
    let mut sorted = SymbolTable::new();
    for l in labels {
        sorted.add(l, nts.count(nts.id(l).unwrap_or(0)));
    }
    Ok(Vocab { words, nts: sorted })
}

/// Surface-feature signature for an unknown word: `UNK`, a case class,
/// digit and dash flags, a known-lowercase flag and a suffix class.
pub fn unk_signature(word: &str, sentence_initial: bool, lowercase_known: bool) -> String {
    let mut sig = String::from(UNK);
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();
    let first_upper = word.chars().next().is_some_and(char::is_uppercase);
    let has_lower = letters.iter().any(|c| c.is_lowercase());
    if letters.len() > 1 && !has_lower {
        sig.push_str("-CAPS");
    } else if first_upper && !sentence_initial {
        sig.push_str("-CAP");
    } else if has_lower || first_upper {
        sig.push_str("-LC");
    }
    if word.chars().any(|c| c.is_ascii_digit()) {
        sig.push_str("-NUM");
    }
    if word.contains('-') {
        sig.push_str("-DASH");
    }
    let lower = word.to_lowercase();
    if lowercase_known && lower != word {
        sig.push_str("-KNOWNLC");
    }
    if let Some(suffix) = suffix_class(&lower) {
        sig.push('-');
        sig.push_str(suffix);
    }
    sig
}

fn suffix_class(lower: &str) -> Option<&'static str> {
    let n = lower.chars().count();
    if n >= 5 {
        for s in ["ing", "ion", "ity", "est", "ed", "er", "ly", "al", "y"] {
            if lower.ends_with(s) {
                return Some(s);
            }
        }
    }
    if n >= 3 && lower.ends_with('s') {
        let prev = lower.chars().rev().nth(1);
        if !matches!(prev, Some('s' | 'i' | 'u')) {
            return Some("s");
        }
    }
    None
}

impl Vocab {
    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_nts(&self) -> usize {
        self.nts.len()
    }

    /// Id of a token, falling back to its signature and then to [`UNK`].
    pub fn word_id(&self, word: &str, sentence_initial: bool) -> u32 {
        if let Some(id) = self.words.id(word) {
            return id;
        }
        let sig = self.unkify(word, sentence_initial);
        self.words
            .id(&sig)
            .or_else(|| self.words.id(UNK))
            .expect("vocabulary always contains UNK")
    }

    pub fn unkify(&self, word: &str, sentence_initial: bool) -> String {
        unk_signature(word, sentence_initial, self.words.contains(&word.to_lowercase()))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, w)| self.word_id(w.as_ref(), i == 0))
            .collect()
    }

    /// Oracle actions of `tree` mapped to ids.
    pub fn encode_actions(&self, tree: &Tree) -> Result<Vec<Action>> {
        let mut pos = 0;
        oracle_actions(tree)
            .into_iter()
            .map(|a| {
                Ok(match a {
                    Action::Nt(l) => Action::Nt(
                        self.nts
                            .id(&l)
                            .ok_or_else(|| Error::Data(format!("unknown nonterminal {l}")))?,
                    ),
                    Action::Gen(w) => {
                        pos += 1;
                        Action::Gen(self.word_id(&w, pos == 1))
                    }
                    Action::Reduce => Action::Reduce,
                    Action::Pad => Action::Pad,
                })
            })
            .collect()
    }

    /// Converts id actions back to symbols; GEN symbols come from `tokens`
    /// when given so unknown words print as they appeared.
    pub fn decode_actions(&self, actions: &[Action], tokens: Option<&[String]>) -> Vec<Action<String>> {
        let mut pos = 0;
        actions
            .iter()
            .map(|a| match a {
                Action::Nt(x) => Action::Nt(self.nts.symbol(*x).to_string()),
                Action::Gen(w) => {
                    let s = match tokens {
                        Some(t) => t[pos].clone(),
                        None => self.words.symbol(*w).to_string(),
                    };
                    pos += 1;
                    Action::Gen(s)
                }
                Action::Reduce => Action::Reduce,
                Action::Pad => Action::Pad,
            })
            .collect()
    }

    pub fn save(&self, words_path: &Path, nts_path: &Path) -> Result<()> {
        std::fs::write(words_path, self.words.to_text()).map_err(|e| Error::io(words_path, e))?;
        std::fs::write(nts_path, self.nts.to_text()).map_err(|e| Error::io(nts_path, e))
    }

    pub fn load(words_path: &Path, nts_path: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let words = SymbolTable::from_text(&read(words_path)?)?;
        let nts = SymbolTable::from_text(&read(nts_path)?)?;
        if !words.contains(UNK) {
            return Err(Error::Data(format!("{} lacks the {UNK} entry", words_path.display())));
        }
        Ok(Vocab { words, nts })
    }
}
