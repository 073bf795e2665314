//! Reading inputs and writing artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rnng_core::treebank::{read_treebank, Tree};
use serde::Serialize;
use serde_json::Value;

use crate::{Cli, Failure};

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn read_trees(path: &Path) -> Result<Vec<Tree>, Failure> {
    let trees = read_treebank(&read_text(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if trees.is_empty() {
        return Err(Failure::Data(format!("{}: no trees", path.display())));
    }
    Ok(trees)
}

/// Token lists, with gold trees when the input was a treebank.
pub type Sentences = (Vec<Vec<String>>, Option<Vec<Tree>>);

/// Sentences from a file of trees or of token lines. Trees come back too,
/// as gold references.
pub fn read_sentences(path: &Path) -> Result<Sentences, Failure> {
    let text = read_text(path)?;
    let bracketed = text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('('));
    if bracketed {
        let trees = read_trees(path)?;
        let tokens = trees.iter().map(|t| t.leaves().iter().map(|s| s.to_string()).collect()).collect();
        return Ok((tokens, Some(trees)));
    }
    let tokens: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if tokens.is_empty() {
        return Err(Failure::Data(format!("{}: no sentences", path.display())));
    }
    Ok((tokens, None))
}

/// Output directory, created on demand.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        Ok(Self(dir.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    /// Writes `config.json`: the invocation plus everything resolved from
    /// it (model, training and beam settings, derived sizes).
    pub fn echo(&self, cli: &Cli, resolved: Value) -> Result<(), Failure> {
        let doc = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "invocation": cli,
            "resolved": resolved,
        });
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        self.write("config.json", &(text + "\n"))
    }

    pub fn write(&self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
    }

    pub fn lines(&self, name: &str) -> Result<Lines, Failure> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
        Ok(Lines {
            path: p,
            out: BufWriter::new(f),
        })
    }
}

/// A line-oriented artifact (CSV or JSON lines), flushed per line so
/// long runs can be followed.
pub struct Lines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Lines {
    pub fn line(&mut self, text: &str) -> Result<(), Failure> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Failure::Data(format!("{}: {e}", self.path.display())))
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> Result<(), Failure> {
        self.line(&serde_json::to_string(value).expect("serializable"))
    }
}
