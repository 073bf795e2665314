//! Mini-batch training: length bucketing under an action cap, Adam, periodic
//! dev evaluation and throughput measurement.

mod adam;
mod buckets;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnng_tensor::{Backend, Eager, Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_loss, Encoded, Model, ModelConfig};

pub use adam::AdamState;
pub use buckets::make_buckets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on the summed oracle length of one batch.
    pub max_actions: usize,
    /// Sentences per length group.
    pub bucket: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Batches between dev evaluations.
    pub validate_every: usize,
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub max_hours: Option<f64>,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    /// Global gradient-norm ceiling; off unless set.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_actions: 26_000,
            bucket: 4096,
            lr: 0.001,
            dropout: 0.1,
            validate_every: 1000,
            max_epochs: Some(10),
            max_steps: None,
            max_hours: None,
            seed: 1,
            precision: 32,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_actions == 0 || self.bucket == 0 || self.validate_every == 0 {
            return bad("batch size, action cap, bucket and validation interval must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_epochs == Some(0) || self.max_steps == Some(0) || self.max_hours.is_some_and(|h| h <= 0.0) {
            return bad("stopping limits must be positive".into());
        }
        if self.max_epochs.is_none() && self.max_steps.is_none() && self.max_hours.is_none() {
            return bad("no stopping rule: set max epochs, steps or hours".into());
        }
        if self.precision != 32 && self.precision != 64 {
            return bad(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if self.clip.is_some_and(|c| c <= 0.0) {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub step: usize,
    pub wallclock_s: f64,
    /// Mean per-sentence training NLL since the previous row.
    pub train_nll: f64,
    /// Summed dev NLL, teacher forced, without dropout.
    pub dev_nll: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,wallclock_s,train_nll,dev_nll";

    pub fn csv_row(&self) -> String {
        format!("{},{:.3},{:.6},{:.6}", self.step, self.wallclock_s, self.train_nll, self.dev_nll)
    }
}

/// Summed teacher-forced NLL of `data` and its number of actions.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Encoded], batch_size: usize, max_actions: usize) -> Result<(f64, usize)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let bk = Eager::<T>::new();
    let net = model.net(&bk, false, 0);
    let lengths: Vec<usize> = data.iter().map(|e| e.actions.len()).collect();
    let mut order = make_buckets(&lengths, batch_size, max_actions, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0));
    // Fixed summation order regardless of how the batches were shuffled.
    order.sort();
    let (mut total, mut actions) = (0.0, 0);
    for ids in order {
        let batch: Vec<&Encoded> = ids.iter().map(|&i| &data[i]).collect();
        let out = batch_loss(&net, &batch, None)?;
        total += out.per_sentence.iter().sum::<f64>();
        actions += out.n_actions;
    }
    Ok((total, actions))
}

/// Parameters plus optimizer state, advanced one batch at a time.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Takes the dropout rate from `cfg`.
    pub fn new(mut model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.cfg.dropout = cfg.dropout;
        Ok(Self {
            model,
            adam: AdamState::new(),
            cfg,
            step: 0,
        })
    }

    /// Forward, backward and update on one batch; returns its summed NLL.
    pub fn train_batch(&mut self, batch: &[&Encoded]) -> Result<f64> {
        let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.step as u64;
        let (loss, grads) = {
            let tape = Tape::<T>::new();
            let net = self.model.net(&tape, true, seed);
            let out = batch_loss(&net, batch, None)?;
            let loss = tape.value(&out.total).item()?.as_f64();
            if !loss.is_finite() {
                self.dump_state(batch, &out.per_sentence);
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    step: self.step,
                });
            }
            (loss, tape.backward(out.total)?)
        };
        if let Err(e) = self.adam.update(&mut self.model.params, &grads, self.cfg.lr, self.cfg.clip) {
            self.dump_state(batch, &[]);
            return Err(e);
        }
        self.step += 1;
        Ok(loss)
    }

    fn dump_state(&self, batch: &[&Encoded], per_sentence: &[f64]) {
        log::error!("numeric failure at step {} on a batch of {} sentences", self.step, batch.len());
        for (i, e) in batch.iter().enumerate() {
            let nll = per_sentence.get(i).copied().unwrap_or(f64::NAN);
            log::error!("  row {i}: {} tokens, {} actions, nll {nll}", e.tokens.len(), e.actions.len());
        }
        for (name, a) in self.model.params.iter() {
            let max = a.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
            log::error!("  {name}: max |w| = {max:e}, finite = {}", a.all_finite());
        }
    }
}

/// Callback of [`train`]: metrics row, current model, whether it is the new best.
pub type OnValidate<'a, T> = dyn FnMut(&Metrics, &Model<T>, bool) -> Result<()> + 'a;

/// Outcome of [`train`].
pub struct TrainReport<T: Scalar> {
    /// Parameters with the lowest dev NLL seen, the initial ones included.
    pub best: Model<T>,
    pub last: Model<T>,
    pub best_dev: f64,
    pub history: Vec<Metrics>,
    pub steps: usize,
    pub epochs: usize,
}

/// Trains until a stopping limit, evaluating on `dev` before the first
/// step, every `validate_every` batches and after the last step.
/// `on_validate` sees each metrics row, the current model and whether it
/// is the new best.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &[Encoded],
    dev: &[Encoded],
    cfg: &TrainConfig,
    on_validate: &mut OnValidate<T>,
) -> Result<TrainReport<T>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut tr = Trainer::new(model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train_set.iter().map(|e| e.actions.len()).collect();
    let start = Instant::now();
    let mut history = Vec::new();
    let (mut window_nll, mut window_sents) = (0.0, 0usize);

    let mut validate = |tr: &Trainer<T>, window_nll: f64, window_sents: usize, best: &mut Option<(f64, Model<T>)>| -> Result<Metrics> {
        let (dev_nll, _) = evaluate(&tr.model, dev, cfg.batch_size, cfg.max_actions)?;
        let m = Metrics {
            step: tr.step,
            wallclock_s: start.elapsed().as_secs_f64(),
            train_nll: if window_sents == 0 { f64::NAN } else { window_nll / window_sents as f64 },
            dev_nll,
        };
        let improved = best.as_ref().is_none_or(|(b, _)| dev_nll < *b);
        if improved {
            *best = Some((dev_nll, tr.model.clone()));
        }
        log::info!("step {} dev nll {:.3} train nll {:.3}", m.step, m.dev_nll, m.train_nll);
        on_validate(&m, &tr.model, improved)?;
        Ok(m)
    };

    let mut best = None;
    history.push(validate(&tr, 0.0, 0, &mut best)?);
    let mut epochs = 0;
    'outer: loop {
        if cfg.max_epochs.is_some_and(|n| epochs >= n) {
            break;
        }
        for ids in make_buckets(&lengths, cfg.batch_size, cfg.max_actions, cfg.bucket, &mut rng) {
            let out_of_time = cfg.max_hours.is_some_and(|h| start.elapsed().as_secs_f64() >= h * 3600.0);
            if cfg.max_steps.is_some_and(|n| tr.step >= n) || out_of_time {
                break 'outer;
            }
            let batch: Vec<&Encoded> = ids.iter().map(|&i| &train_set[i]).collect();
            window_nll += tr.train_batch(&batch)?;
            window_sents += batch.len();
            if tr.step % cfg.validate_every == 0 {
                history.push(validate(&tr, window_nll, window_sents, &mut best)?);
                (window_nll, window_sents) = (0.0, 0);
            }
        }
        epochs += 1;
    }
    if window_sents > 0 {
        history.push(validate(&tr, window_nll, window_sents, &mut best)?);
    }
    let (best_dev, best) = best.expect("validated at least once");
    Ok(TrainReport {
        best,
        last: tr.model,
        best_dev,
        history,
        steps: tr.step,
        epochs,
    })
}

/// Training throughput at one batch size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub sentences_per_sec: f64,
    /// Sample standard deviation over seeds.
    pub sd: f64,
    pub seeds: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "batch_size,sentences_per_sec,sd,seeds";

    pub fn csv_row(&self) -> String {
        format!("{},{:.3},{:.3},{}", self.batch_size, self.sentences_per_sec, self.sd, self.seeds)
    }
}

/// Measures full training steps per batch size: for each seed a fresh
/// model is trained on batches from `corpus` until `sentences` sentences
/// have been processed, after one untimed warmup batch.
pub fn bench_throughput<T: Scalar>(
    model_cfg: &ModelConfig,
    corpus: &[Encoded],
    batch_sizes: &[usize],
    seeds: &[u64],
    sentences: usize,
) -> Result<Vec<BenchRow>> {
    if corpus.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("benchmark corpus or seed list"));
    }
    let lengths: Vec<usize> = corpus.iter().map(|e| e.actions.len()).collect();
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let mut rates = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                batch_size: b,
                seed,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(Model::<T>::new(model_cfg.clone(), seed)?, cfg.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = make_buckets(&lengths, b, cfg.max_actions, cfg.bucket, &mut rng);
            let mut it = batches.iter().cycle();
            let mut run = |ids: &Vec<usize>| -> Result<usize> {
                let batch: Vec<&Encoded> = ids.iter().map(|&i| &corpus[i]).collect();
                tr.train_batch(&batch)?;
                Ok(batch.len())
            };
            run(it.next().expect("non-empty"))?;
            let start = Instant::now();
            let mut done = 0;
            while done < sentences {
                done += run(it.next().expect("non-empty"))?;
            }
            rates.push(done as f64 / start.elapsed().as_secs_f64());
        }
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let sd = if rates.len() > 1 {
            (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        log::info!("batch size {b}: {mean:.1} ± {sd:.1} sentences/s");
        rows.push(BenchRow {
            batch_size: b,
            sentences_per_sec: mean,
            sd,
            seeds: rates.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_corpus;
    use crate::synth::{random_trees, TreeShape};
    use crate::treebank::build_vocab;

    fn fixture(n: usize) -> (Vec<Encoded>, ModelConfig) {
        let trees = random_trees(3, n, &TreeShape { max_depth: 4, ..Default::default() });
        let vocab = build_vocab(&trees, 100).unwrap();
        let enc = encode_corpus(&vocab, &trees).unwrap();
        (enc, ModelConfig::uniform(6, vocab.n_words(), vocab.n_nts()))
    }

    #[test]
    fn loss_on_one_tree_falls_for_fifty_steps() {
        let (enc, mcfg) = fixture(1);
        let cfg = TrainConfig {
            dropout: 0.0,
            lr: 0.01,
            ..Default::default()
        };
        let mut tr = Trainer::new(Model::<f64>::new(mcfg, 0).unwrap(), cfg).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = tr.train_batch(&[&enc[0]]).unwrap();
            assert!(loss < prev, "{loss} after {prev}");
            prev = loss;
        }
    }

    fn run(enc: &[Encoded], mcfg: &ModelConfig, seed: u64) -> TrainReport<f64> {
        let cfg = TrainConfig {
            batch_size: 4,
            validate_every: 3,
            max_steps: Some(10),
            max_epochs: None,
            seed,
            ..Default::default()
        };
        let mut rows = 0;
        let r = train(Model::new(mcfg.clone(), seed).unwrap(), enc, &enc[..5], &cfg, &mut |_, _, _| {
            rows += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(rows, r.history.len());
        r
    }

    #[test]
    fn training_is_reproducible_and_keeps_the_best() {
        let (enc, mcfg) = fixture(20);
        let a = run(&enc, &mcfg, 4);
        let b = run(&enc, &mcfg, 4);
        let curve = |r: &TrainReport<f64>| r.history.iter().map(|m| (m.step, m.train_nll.to_bits(), m.dev_nll.to_bits())).collect::<Vec<_>>();
        assert_eq!(curve(&a), curve(&b));
        assert_eq!(a.history.iter().map(|m| m.step).collect::<Vec<_>>(), [0, 3, 6, 9, 10]);
        assert!(a.best_dev <= a.history[0].dev_nll);
        let (dev_best, _) = evaluate(&a.best, &enc[..5], 512, 26_000).unwrap();
        assert_eq!(dev_best, a.best_dev);
    }

    #[test]
    fn config_needs_a_stopping_rule() {
        let cfg = TrainConfig {
            max_epochs: None,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bench_reports_every_batch_size() {
        let (enc, mcfg) = fixture(30);
        let rows = bench_throughput::<f32>(&mcfg, &enc, &[1, 4], &[0, 1], 8).unwrap();
        assert_eq!(rows.iter().map(|r| r.batch_size).collect::<Vec<_>>(), [1, 4]);
        assert!(rows.iter().all(|r| r.sentences_per_sec > 0.0 && r.seeds == 2));
    }
}
