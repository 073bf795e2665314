use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rnng_tensor::{Array, ParamSet, Scalar};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::treebank::{Merges, Vocab};

const MAGIC: &str = "RNNG-CHECKPOINT 1";

/// Hex SHA-256 of a text artifact.
pub fn file_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A saved model: config, weights and the vocabularies they index.
///
/// The main file holds a text header (format line, JSON config, digests of
/// the companion files, parameter count, blank line) followed by one binary
/// record per parameter: name length and bytes, rank and extents, then
/// little-endian 32-bit values. Vocabularies live next to it as
/// `<path>.vocab`, `<path>.nts` and optionally `<path>.merges`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub merges: Option<Merges>,
    pub params: ParamSet<f32>,
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, vocab: &Vocab, merges: Option<&Merges>) -> Self {
        Self {
            config: model.cfg.clone(),
            vocab: vocab.clone(),
            merges: merges.cloned(),
            params: model.params.cast(),
        }
    }

    pub fn model<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let words = self.vocab.words.to_text();
        let nts = self.vocab.nts.to_text();
        let merges = self.merges.as_ref().map(Merges::to_text);
        let cfg = serde_json::to_string(&self.config).map_err(|e| self.err(path, e.to_string()))?;
        let mut buf = Vec::new();
        let header = format!(
            "{MAGIC}\nconfig: {cfg}\nvocab-sha256: {}\nnts-sha256: {}\nmerges-sha256: {}\nparams: {}\n\n",
            file_digest(&words),
            file_digest(&nts),
            merges.as_deref().map_or("none".to_string(), file_digest),
            self.params.len()
        );
        buf.extend_from_slice(header.as_bytes());
        for (name, a) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &d in a.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let write = |p: &Path, bytes: &[u8]| std::fs::write(p, bytes).map_err(|e| Error::io(p, e));
        write(path, &buf)?;
        write(&sidecar(path, "vocab"), words.as_bytes())?;
        write(&sidecar(path, "nts"), nts.as_bytes())?;
        if let Some(m) = merges {
            write(&sidecar(path, "merges"), m.as_bytes())?;
        }
        Ok(())
    }

    fn err(&self, path: &Path, msg: String) -> Error {
        Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("unknown format line".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(": "))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing {key} field")))
        };
        let config: ModelConfig = serde_json::from_str(&field("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let (vocab_sha, nts_sha, merges_sha) = (field("vocab-sha256")?, field("nts-sha256")?, field("merges-sha256")?);
        let count: usize = field("params")?.parse().map_err(|_| bad("bad parameter count".into()))?;

        let read = |ext: &str| {
            let p = sidecar(path, ext);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let words = read("vocab")?;
        let nts = read("nts")?;
        if file_digest(&words) != vocab_sha || file_digest(&nts) != nts_sha {
            return Err(bad("vocabulary digest mismatch".into()));
        }
        let merges = if merges_sha == "none" {
            None
        } else {
            let text = read("merges")?;
            if file_digest(&text) != merges_sha {
                return Err(bad("merges digest mismatch".into()));
            }
            Some(Merges::from_text(&text)?)
        };
        let vocab = Vocab {
            words: crate::treebank::SymbolTable::from_text(&words)?,
            nts: crate::treebank::SymbolTable::from_text(&nts)?,
        };

        let mut body = &bytes[split + 2..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if body.len() < n {
                return Err(bad("truncated parameter records".into()));
            }
            let (head, rest) = body.split_at(n);
            body = rest;
            Ok(head)
        };
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(&name, Array::new(&shape, data)?)?;
        }
        if !body.is_empty() {
            return Err(bad("trailing bytes after parameter records".into()));
        }
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                _ => return Err(bad(format!("parameter {name} missing or misshapen"))),
            }
        }
        if params.len() != config.param_shapes().len() {
            return Err(bad("unexpected extra parameters".into()));
        }
        if vocab.n_words() != config.n_words || vocab.n_nts() != config.n_nts {
            return Err(bad("vocabulary sizes disagree with the config".into()));
        }
        log::info!("loaded {} ({} parameters)", path.display(), params.count());
        Ok(Self {
            config,
            vocab,
            merges,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{build_vocab, parse_tree};

    fn fixture() -> (Model<f32>, Vocab) {
        let trees = vec![parse_tree("(S (NP the dog) (VP barks))").unwrap()];
        let vocab = build_vocab(&trees, 100).unwrap();
        let cfg = ModelConfig::uniform(4, vocab.n_words(), vocab.n_nts());
        (Model::new(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, vocab) = fixture();
        let merges = Merges::new(vec![("▁t".into(), "h".into())]);
        Checkpoint::from_model(&model, &vocab, Some(&merges)).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, model.cfg);
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.merges, Some(merges));
        for (name, a) in model.params.iter() {
            let b = back.params.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, vocab) = fixture();
        Checkpoint::from_model(&model, &vocab, None).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));

        Checkpoint::from_model(&model, &vocab, None).save(&path).unwrap();
        std::fs::write(sidecar(&path, "vocab"), "0\tx\t1\n").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
    }
}
