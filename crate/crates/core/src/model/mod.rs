//! The stack-only RNNG: parameters, batched teacher-forced loss, an
//! unbatched reference implementation, ancestral sampling and checkpoints.

mod checkpoint;
mod loss;
mod net;
pub mod reference;
mod sample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnng_tensor::{Array, Backend, ParamSet, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::StackDims;

pub use checkpoint::{file_digest, Checkpoint};
pub use loss::{batch_loss, check_legal, encode_corpus, encode_tree, Encoded, LossOutput};
pub use net::{lstm_cell, Net};
pub use sample::{sample, Sample, SampleConfig};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// Embedding width E of words, nonterminals and composed constituents.
    pub emb: usize,
    /// Stack-LSTM hidden width H.
    pub hidden: usize,
    /// Stack-LSTM layers L.
    pub layers: usize,
    /// Composition BiLSTM hidden width per direction.
    pub compose_hidden: usize,
    /// Width of the MLP feeding the output heads.
    pub mlp_hidden: usize,
    pub n_words: usize,
    pub n_nts: usize,
    pub dropout: f64,
    /// Terminals are subword units.
    pub subword: bool,
    /// Word output matrix shared with the word embedding; needs
    /// `mlp_hidden == emb`.
    pub tie_embeddings: bool,
    /// Upper bound on simultaneously open nonterminals at inference.
    pub max_open_nt: usize,
}

/// Named size presets. Word models keep 50k types; subword presets pair a
/// unit inventory with the width that gives roughly 15M or 35M parameters.
pub const PRESETS: &[(&str, usize, usize)] = &[
    ("word-256", 256, 50_000),
    ("subword-10k-15m", 528, 10_240),
    ("subword-20k-15m", 432, 20_480),
    ("subword-30k-15m", 336, 30_720),
    ("subword-10k-35m", 864, 10_240),
    ("subword-20k-35m", 752, 20_480),
    ("subword-30k-35m", 656, 30_720),
];

impl ModelConfig {
    /// Every width equal to `dim`, two stack layers, tied output layer.
    pub fn uniform(dim: usize, n_words: usize, n_nts: usize) -> Self {
        Self {
            preset: format!("custom-{dim}"),
            emb: dim,
            hidden: dim,
            layers: 2,
            compose_hidden: dim,
            mlp_hidden: dim,
            n_words,
            n_nts,
            dropout: 0.1,
            subword: false,
            tie_embeddings: true,
            max_open_nt: 100,
        }
    }

    /// Preset by name with the unit count it was sized for; `n_nts` comes
    /// from the treebank.
    pub fn preset(name: &str, n_nts: usize) -> Result<Self> {
        let &(_, dim, units) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
        let mut cfg = Self::uniform(dim, units, n_nts);
        cfg.preset = name.to_string();
        cfg.subword = name.starts_with("subword");
        Ok(cfg)
    }

    pub fn n_actions(&self) -> usize {
        self.n_nts + 2
    }

    pub fn stack_dims(&self) -> StackDims {
        StackDims {
            layers: self.layers,
            hidden: self.hidden,
            emb: self.emb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.emb,
            self.hidden,
            self.layers,
            self.compose_hidden,
            self.mlp_hidden,
            self.n_words,
            self.n_nts,
            self.max_open_nt,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all model extents must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.tie_embeddings && self.mlp_hidden != self.emb {
            return Err(Error::Config(format!(
                "tied output layer needs mlp_hidden ({}) == emb ({})",
                self.mlp_hidden, self.emb
            )));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, hc, hm) = (self.emb, self.hidden, self.compose_hidden, self.mlp_hidden);
        let mut out = vec![
            ("word_emb".to_string(), vec![self.n_words, e]),
            ("nt_emb".to_string(), vec![self.n_nts, e]),
        ];
        for l in 0..self.layers {
            let input = if l == 0 { e } else { h };
            out.push((format!("stack.l{l}.w_ih"), vec![input, 4 * h]));
            out.push((format!("stack.l{l}.w_hh"), vec![h, 4 * h]));
            out.push((format!("stack.l{l}.b"), vec![4 * h]));
        }
        for dir in ["fwd", "bwd"] {
            out.push((format!("compose.{dir}.w_ih"), vec![e, 4 * hc]));
            out.push((format!("compose.{dir}.w_hh"), vec![hc, 4 * hc]));
            out.push((format!("compose.{dir}.b"), vec![4 * hc]));
        }
        out.push(("compose.proj.w".into(), vec![2 * hc, e]));
        out.push(("compose.proj.b".into(), vec![e]));
        out.push(("mlp.w".into(), vec![h, hm]));
        out.push(("mlp.b".into(), vec![hm]));
        out.push(("action.w".into(), vec![hm, self.n_actions()]));
        out.push(("action.b".into(), vec![self.n_actions()]));
        if !self.tie_embeddings {
            out.push(("word.w".into(), vec![hm, self.n_words]));
        }
        out.push(("word.b".into(), vec![self.n_words]));
        out.push(("init_state".into(), vec![self.layers, 2, h]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn is_lstm_bias(name: &str) -> bool {
    name.ends_with(".b") && (name.starts_with("stack.") || name.starts_with("compose.fwd") || name.starts_with("compose.bwd"))
}

/// Configuration plus weights at precision `T`.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Xavier-uniform matrices, zero biases with forget gates at +1, zero
    /// initial state.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if shape.len() == 2 && name != "init_state" {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            } else if is_lstm_bias(&name) {
                let h = n / 4;
                (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(&name, Array::from_f64(&shape, &values)?)?;
        }
        Ok(Self { cfg, params })
    }

    /// All parameters zero: every distribution is uniform.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            params.insert(&name, Array::zeros(&shape))?;
        }
        Ok(Self { cfg, params })
    }

    /// Binds the weights to `bk`; `train` enables dropout drawn from
    /// `seed`.
    pub fn net<'a, B: Backend<Elem = T>>(&'a self, bk: &'a B, train: bool, seed: u64) -> Net<'a, B> {
        Net::new(bk, &self.cfg, self.params.bind(bk), train, seed)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Multiplies every weight by `factor`; sharpens distributions of a
    /// freshly initialised model in tests.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (_, a) in out.params.iter_mut() {
            *a = a.map(|v| T::of(v.as_f64() * factor));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_preset_is_about_fifteen_million() {
        let cfg = ModelConfig::preset("word-256", 26).unwrap();
        let n = cfg.param_count();
        assert!((14_000_000..=17_000_000).contains(&n), "{n}");
    }

    #[test]
    fn subword_presets_match_their_size_class() {
        for (name, _, _) in PRESETS.iter().filter(|p| p.0.starts_with("subword")) {
            let n = ModelConfig::preset(name, 26).unwrap().param_count() as f64;
            let target = if name.ends_with("15m") { 15e6 } else { 35e6 };
            assert!((n / target - 1.0).abs() < 0.1, "{name}: {n}");
        }
    }

    #[test]
    fn init_follows_conventions() {
        let m = Model::<f64>::new(ModelConfig::uniform(4, 5, 2), 0).unwrap();
        let b = m.params.get("stack.l0.b").unwrap();
        assert_eq!(b.to_f64_vec(), [0., 0., 0., 0., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0.]);
        let w = m.params.get("stack.l0.w_ih").unwrap();
        let a = (6.0f64 / 20.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= a));
        assert!(m.params.get("init_state").unwrap().data().iter().all(|&v| v == 0.0));
        let again = Model::<f64>::new(ModelConfig::uniform(4, 5, 2), 0).unwrap();
        assert_eq!(w.data(), again.params.get("stack.l0.w_ih").unwrap().data());
    }

    #[test]
    fn tying_needs_matching_widths() {
        let mut cfg = ModelConfig::uniform(4, 5, 2);
        cfg.mlp_hidden = 6;
        assert!(cfg.validate().is_err());
        cfg.tie_embeddings = false;
        cfg.validate().unwrap();
        assert!(cfg.param_shapes().iter().any(|(n, _)| n == "word.w"));
    }
}
