use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnng_core::beam::{batched_beam, corpus_f1, parse_sentences, pairs_eval, perplexity, prepare, read_suite, BeamConfig, ParseRecord};
use rnng_core::checks::{batched_vs_reference, beam_vs_enumeration, dense_random, gradient_check};
use rnng_core::model::{encode_corpus, sample, Checkpoint, Encoded, Model, ModelConfig, SampleConfig};
use rnng_core::synth::{random_trees, synthetic_corpus, toy_treebank, toy_vocab, TreeShape};
use rnng_core::trainer::{bench_throughput, evaluate, train, BenchRow, Metrics, TrainConfig};
use rnng_core::treebank::{bpe_train, build_vocab, min_stack_depth, oracle_actions, segment_tree, Merges, Tree, Vocab};
use rnng_tensor::{Eager, Scalar};
use serde::Serialize;
use serde_json::json;

use crate::files::{read_sentences, read_text, read_trees, OutDir};
use crate::{BeamArgs, BenchBeamArgs, BenchTrainArgs, Cli, Command, Failure, OracleArgs, PairsArgs, ParseArgs, SelfcheckArgs, TrainArgs};

type Res<T> = Result<T, Failure>;

pub fn run(cli: &Cli) -> Res<()> {
    let wide = cli.precision == 64;
    match &cli.command {
        Command::Train(a) if wide => train_cmd::<f64>(cli, a),
        Command::Train(a) => train_cmd::<f32>(cli, a),
        Command::Parse(a) if wide => parse_cmd::<f64>(cli, a),
        Command::Parse(a) => parse_cmd::<f32>(cli, a),
        Command::Ppl(a) if wide => ppl_cmd::<f64>(cli, a),
        Command::Ppl(a) => ppl_cmd::<f32>(cli, a),
        Command::PairsEval(a) if wide => pairs_cmd::<f64>(cli, a),
        Command::PairsEval(a) => pairs_cmd::<f32>(cli, a),
        Command::Oracle(a) => oracle_cmd(cli, a),
        Command::BenchTrain(a) if wide => bench_train_cmd::<f64>(cli, a),
        Command::BenchTrain(a) => bench_train_cmd::<f32>(cli, a),
        Command::BenchBeam(a) if wide => bench_beam_cmd::<f64>(cli, a),
        Command::BenchBeam(a) => bench_beam_cmd::<f32>(cli, a),
        Command::Selfcheck(a) => selfcheck_cmd(cli, a),
    }
}

fn config_err(e: rnng_core::Error) -> Failure {
    Failure::Config(e.to_string())
}

fn beam_config(args: &BeamArgs) -> Res<BeamConfig> {
    let cfg = args.config(args.beam_k);
    cfg.validate().map_err(config_err)?;
    if args.beam_batch == 0 {
        return Err(Failure::Config("beam batch must be positive".into()));
    }
    Ok(cfg)
}

fn train_cmd<T: Scalar>(cli: &Cli, a: &TrainArgs) -> Res<()> {
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        max_actions: a.max_actions,
        bucket: a.bucket,
        lr: a.lr,
        dropout: a.dropout,
        validate_every: a.validate_every,
        max_epochs: Some(a.max_epochs),
        max_steps: a.max_steps,
        max_hours: a.max_hours,
        seed: cli.seed,
        precision: cli.precision,
        clip: a.clip,
    };
    cfg.validate().map_err(config_err)?;
    let mut train_trees = read_trees(&a.train)?;
    let mut dev_trees = read_trees(&a.dev)?;
    let mut test_trees = a.test.as_deref().map(read_trees).transpose()?;

    let preset = ModelConfig::preset(&a.preset, 0).map_err(config_err)?;
    let merges = match (&a.subword_merges, a.subword_units) {
        (Some(p), _) => Some(Merges::load(p)?),
        (None, Some(n)) => Some(learn_merges(&train_trees, n)?),
        // Subword presets name their unit count.
        (None, None) if preset.subword => Some(learn_merges(&train_trees, preset.n_words)?),
        (None, None) => None,
    };
    if let Some(m) = &merges {
        let seg = |ts: &mut Vec<Tree>| ts.iter_mut().for_each(|t| *t = segment_tree(t, m));
        seg(&mut train_trees);
        seg(&mut dev_trees);
        test_trees.iter_mut().for_each(seg);
    }
    let vocab = build_vocab(&train_trees, a.vocab_size)?;
    let mut model_cfg = match a.dim {
        Some(d) => ModelConfig::uniform(d, vocab.n_words(), vocab.n_nts()),
        None => ModelConfig::preset(&a.preset, vocab.n_nts()).map_err(config_err)?,
    };
    model_cfg.n_words = vocab.n_words();
    model_cfg.layers = a.layers;
    model_cfg.dropout = a.dropout;
    model_cfg.subword = merges.is_some();
    model_cfg.validate().map_err(config_err)?;

    let train_set = encode_corpus(&vocab, &train_trees)?;
    let dev_set = encode_corpus(&vocab, &dev_trees)?;
    let out = OutDir::create(&a.out)?;
    out.echo(
        cli,
        json!({
            "model": model_cfg,
            "train": cfg,
            "vocab_words": vocab.n_words(),
            "vocab_nts": vocab.n_nts(),
            "merges": merges.as_ref().map(Merges::len),
            "train_sentences": train_set.len(),
            "dev_sentences": dev_set.len(),
        }),
    )?;
    let mut metrics = out.lines("metrics.csv")?;
    metrics.line(Metrics::CSV_HEADER)?;
    let model = Model::<T>::new(model_cfg, cli.seed)?;
    let best_path = out.path("best.ckpt");
    let mut failed = None;
    let mut on_validate = |m: &Metrics, model: &Model<T>, improved: bool| {
        if let Err(f) = metrics.line(&m.csv_row()) {
            failed = Some(f);
        }
        if improved {
            Checkpoint::from_model(model, &vocab, merges.as_ref()).save(&best_path)?;
        }
        Ok(())
    };
    let report = train(model, &train_set, &dev_set, &cfg, &mut on_validate)?;
    if let Some(f) = failed {
        return Err(f);
    }
    Checkpoint::from_model(&report.last, &vocab, merges.as_ref()).save(&out.path("last.ckpt"))?;
    let test_nll = match &test_trees {
        Some(ts) => Some(evaluate(&report.best, &encode_corpus(&vocab, ts)?, cfg.batch_size, cfg.max_actions)?.0),
        None => None,
    };
    let summary = json!({
        "steps": report.steps,
        "epochs": report.epochs,
        "best_dev_nll": report.best_dev,
        "test_nll": test_nll,
    });
    out.write("summary.json", &format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

fn learn_merges(trees: &[Tree], units: usize) -> Res<Merges> {
    let leaves: Vec<&str> = trees.iter().flat_map(|t| t.leaves()).collect();
    Ok(bpe_train(leaves.iter().copied(), units)?)
}

/// Loads a checkpoint before anything is written.
fn load(path: &std::path::Path) -> Res<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn parse_cmd<T: Scalar>(cli: &Cli, a: &ParseArgs) -> Res<()> {
    let beam = beam_config(&a.beam)?;
    let ckpt = load(&a.checkpoint)?;
    let (sentences, gold) = read_sentences(&a.test)?;
    let model = ckpt.model::<T>();
    let bk = Eager::<T>::new();
    let net = model.net(&bk, false, 0);
    let parsed = parse_sentences(&net, &ckpt.vocab, ckpt.merges.as_ref(), &sentences, &beam, a.beam.beam_batch)?;

    let out = OutDir::create(&a.out)?;
    out.echo(cli, json!({ "model": ckpt.config, "beam": beam, "sentences": sentences.len() }))?;
    let mut lines = out.lines("parses.jsonl")?;
    for (i, p) in parsed.iter().enumerate() {
        lines.json(&ParseRecord::new(json!(i), p, a.bits))?;
    }
    let f1 = match &gold {
        Some(g) => Some(corpus_f1(parsed.iter().map(|p| &p.tree).zip(g))?),
        None => None,
    };
    let summary = json!({ "sentences": parsed.len(), "bracket": f1 });
    out.write("summary.json", &format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

fn ppl_cmd<T: Scalar>(cli: &Cli, a: &ParseArgs) -> Res<()> {
    let beam = beam_config(&a.beam)?;
    let ckpt = load(&a.checkpoint)?;
    let (sentences, _) = read_sentences(&a.test)?;
    let model = ckpt.model::<T>();
    let bk = Eager::<T>::new();
    let net = model.net(&bk, false, 0);
    let parsed = parse_sentences(&net, &ckpt.vocab, ckpt.merges.as_ref(), &sentences, &beam, a.beam.beam_batch)?;

    let out = OutDir::create(&a.out)?;
    out.echo(cli, json!({ "model": ckpt.config, "beam": beam, "sentences": sentences.len() }))?;
    let mut csv = out.lines("ppl.csv")?;
    csv.line("id,tokens,logp,ppl")?;
    let (mut total, mut tokens) = (0.0, 0);
    for (i, p) in parsed.iter().enumerate() {
        let logp: f64 = p.token_logp.iter().sum();
        let n = p.token_logp.len();
        csv.line(&format!("{i},{n},{logp:.6},{:.6}", perplexity(logp, n)?))?;
        total += logp;
        tokens += n;
    }
    let ppl = perplexity(total, tokens)?;
    let summary = json!({ "sentences": parsed.len(), "tokens": tokens, "logp": total, "ppl": ppl });
    out.write("summary.json", &format!("{summary}\n"))?;
    println!("{ppl:.6}");
    Ok(())
}

fn pairs_cmd<T: Scalar>(cli: &Cli, a: &PairsArgs) -> Res<()> {
    let beam = beam_config(&a.beam)?;
    let ckpt = load(&a.checkpoint)?;
    let items = read_suite(&read_text(&a.suite)?)?;
    let model = ckpt.model::<T>();
    let bk = Eager::<T>::new();
    let net = model.net(&bk, false, 0);
    let (results, accuracy) = pairs_eval(&net, &ckpt.vocab, ckpt.merges.as_ref(), &items, &beam, a.beam.beam_batch)?;

    let out = OutDir::create(&a.out)?;
    out.echo(cli, json!({ "model": ckpt.config, "beam": beam, "items": items.len() }))?;
    let mut lines = out.lines("pairs.jsonl")?;
    for r in &results {
        lines.json(r)?;
    }
    let summary = json!({ "items": results.len(), "accuracy": accuracy });
    out.write("summary.json", &format!("{summary}\n"))?;
    println!("{accuracy:.6}");
    Ok(())
}

#[derive(Serialize)]
struct OracleRecord {
    id: usize,
    actions: Vec<String>,
    depth: usize,
}

fn oracle_cmd(cli: &Cli, a: &OracleArgs) -> Res<()> {
    let trees = read_trees(&a.trees)?;
    let mut records = Vec::with_capacity(trees.len());
    for (id, t) in trees.iter().enumerate() {
        let acts = oracle_actions(t);
        records.push(OracleRecord {
            id,
            depth: min_stack_depth(&acts)?,
            actions: acts.iter().map(ToString::to_string).collect(),
        });
    }
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        out.echo(cli, json!({ "trees": trees.len() }))?;
        let mut lines = out.lines("oracle.jsonl")?;
        records.iter().try_for_each(|r| lines.json(r))?;
    }
    for r in &records {
        println!("{}", serde_json::to_string(r).expect("serializable"));
    }
    Ok(())
}

fn bench_train_cmd<T: Scalar>(cli: &Cli, a: &BenchTrainArgs) -> Res<()> {
    if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) || a.seeds.is_empty() || a.sentences == 0 {
        return Err(Failure::Config("batch sizes and seeds must be non-empty and positive".into()));
    }
    let trees = match &a.train {
        Some(p) => read_trees(p)?,
        None => synthetic_corpus(cli.seed, a.synthetic, 500),
    };
    let vocab = build_vocab(&trees, 50_000)?;
    let mut cfg = ModelConfig::uniform(a.dim, vocab.n_words(), vocab.n_nts());
    cfg.validate().map_err(config_err)?;
    cfg.dropout = TrainConfig::default().dropout;
    let corpus = encode_corpus(&vocab, &trees)?;
    let out = OutDir::create(&a.out)?;
    out.echo(cli, json!({ "model": cfg, "train": TrainConfig::default(), "sentences": corpus.len() }))?;
    let rows = bench_throughput::<T>(&cfg, &corpus, &a.batch_sizes, &a.seeds, a.sentences)?;
    let mut csv = out.lines("bench_train.csv")?;
    csv.line(BenchRow::CSV_HEADER)?;
    println!("{}", BenchRow::CSV_HEADER);
    for r in &rows {
        csv.line(&r.csv_row())?;
        println!("{}", r.csv_row());
    }
    Ok(())
}

pub const BENCH_BEAM_HEADER: &str = "k,k_w,k_s,batch_size,sentences,sec_per_sentence";

fn bench_beam_cmd<T: Scalar>(cli: &Cli, a: &BenchBeamArgs) -> Res<()> {
    if a.beam_sizes.is_empty() || a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) {
        return Err(Failure::Config("beam and batch sizes must be non-empty and positive".into()));
    }
    let configs: Vec<BeamConfig> = a
        .beam_sizes
        .iter()
        .map(|&k| BeamConfig {
            token_cap: a.token_cap,
            depth: a.depth_bound,
            ..BeamConfig::with_schedule(k)
        })
        .collect();
    for c in &configs {
        c.validate().map_err(config_err)?;
    }
    let (model, vocab, merges): (Model<T>, Vocab, Option<Merges>) = match &a.checkpoint {
        Some(p) => {
            let c = load(p)?;
            (c.model(), c.vocab, c.merges)
        }
        None => {
            let trees = synthetic_corpus(cli.seed, 2000, 200);
            let vocab = build_vocab(&trees, 50_000)?;
            let mut cfg = ModelConfig::uniform(a.dim, vocab.n_words(), vocab.n_nts());
            cfg.dropout = 0.0;
            (Model::new(cfg, cli.seed)?, vocab, None)
        }
    };
    let sentences: Vec<Vec<String>> = match &a.test {
        Some(p) => read_sentences(p)?.0,
        None => synthetic_corpus(cli.seed + 1, a.synthetic, 200)
            .iter()
            .map(|t| t.leaves().iter().map(|s| s.to_string()).collect())
            .collect(),
    };
    let ids: Vec<Vec<u32>> = sentences.iter().map(|s| prepare(&vocab, merges.as_ref(), s).ids).collect();
    let out = OutDir::create(&a.out)?;
    out.echo(cli, json!({ "model": model.cfg, "beams": configs, "sentences": ids.len() }))?;
    let bk = Eager::<T>::new();
    let net = model.net(&bk, false, 0);
    let mut csv = out.lines("bench_beam.csv")?;
    csv.line(BENCH_BEAM_HEADER)?;
    println!("{BENCH_BEAM_HEADER}");
    for c in &configs {
        for &b in &a.batch_sizes {
            let start = Instant::now();
            batched_beam(&net, &ids, c, b)?;
            let per = start.elapsed().as_secs_f64() / ids.len() as f64;
            let row = format!("{},{},{},{b},{},{per:.6}", c.k, c.k_w, c.k_s, ids.len());
            csv.line(&row)?;
            println!("{row}");
        }
    }
    Ok(())
}

/// Tolerances of the self-checks: (batched vs reference, beam vs
/// enumeration). Tighter in 64-bit mode.
fn tolerances(precision: u32) -> (f64, f64) {
    if precision == 64 {
        (1e-9, 1e-7)
    } else {
        (1e-4, 1e-5)
    }
}

type Check<'a> = Box<dyn Fn() -> rnng_core::Result<(bool, String)> + 'a>;

fn selfcheck_cmd(cli: &Cli, a: &SelfcheckArgs) -> Res<()> {
    let (tol_batch, tol_beam) = tolerances(cli.precision);
    let wide = cli.precision == 64;
    let mut checks: Vec<(&str, Check)> = vec![
        (
            "batched-vs-unbatched",
            Box::new(move || {
                let trees = random_trees(cli.seed, 20, &TreeShape::default());
                let vocab = build_vocab(&trees, 50)?;
                let mut cfg = ModelConfig::uniform(8, vocab.n_words(), vocab.n_nts());
                cfg.dropout = 0.0;
                let enc = encode_corpus(&vocab, &trees)?;
                let d = if wide {
                    batched_vs_reference(&Model::<f64>::new(cfg, cli.seed)?, &enc, 8)?
                } else {
                    batched_vs_reference(&Model::<f32>::new(cfg, cli.seed)?, &enc, 8)?
                };
                Ok((d.worst < tol_batch, format!("worst relative error {:.2e} at {} (tolerance {tol_batch:.0e})", d.worst, d.at)))
            }),
        ),
        (
            "gradient",
            Box::new(move || {
                let shape = TreeShape {
                    max_depth: 3,
                    n_words: 4,
                    ..Default::default()
                };
                let trees = random_trees(cli.seed, 2, &shape);
                let vocab = build_vocab(&trees, 100)?;
                let mut cfg = ModelConfig::uniform(3, vocab.n_words(), vocab.n_nts());
                cfg.dropout = 0.0;
                cfg.layers = 1;
                let model = dense_random(cfg, cli.seed, 0.5)?;
                let d = gradient_check(&model, &encode_corpus(&vocab, &trees)?, 1e-4, 1e-6)?;
                Ok((d.worst < 1e-3, format!("{} entries, worst relative error {:.2e} at {}", d.checked, d.worst, d.at)))
            }),
        ),
        (
            "beam-vs-enumeration",
            Box::new(move || {
                let vocab = toy_vocab();
                let mut cfg = ModelConfig::uniform(8, vocab.n_words(), vocab.n_nts());
                cfg.dropout = 0.0;
                cfg.max_open_nt = 2;
                let model = Model::<f64>::new(cfg, cli.seed)?.scaled(3.0);
                let sentences: Vec<Vec<u32>> = toy_treebank(cli.seed, 6).iter().map(|t| vocab.encode_tokens(&t.leaves())).collect();
                let r = beam_vs_enumeration(&model, &sentences, &BeamConfig::with_schedule(1000))?;
                let ok = r.tree_mismatches == 0 && r.score.worst < tol_beam;
                Ok((ok, format!("{} tree mismatches, worst gap {:.2e} (tolerance {tol_beam:.0e})", r.tree_mismatches, r.score.worst)))
            }),
        ),
    ];
    if let Some(path) = a.checkpoint.clone() {
        checks.push(("checkpoint", Box::new(move || check_checkpoint(&path, cli.seed, tol_batch, wide))));
    }
    let mut failed = Vec::new();
    for (name, check) in &checks {
        let (ok, detail) = check().unwrap_or_else(|e| (false, e.to_string()));
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("self-check failed: {}", failed.join(", "))))
    }
}

/// Loads, checks every weight is finite, then compares batched and
/// reference scoring on sentences sampled from the model itself.
fn check_checkpoint(path: &std::path::Path, seed: u64, tol: f64, wide: bool) -> rnng_core::Result<(bool, String)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.config.validate()?;
    if let Some((name, _)) = ckpt.params.iter().find(|(_, a)| a.data().iter().any(|v| !v.is_finite())) {
        return Ok((false, format!("parameter {name} has non-finite entries")));
    }
    let model = ckpt.model::<f64>();
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scfg = SampleConfig {
        max_actions: 400,
        max_open_nt: model.cfg.max_open_nt,
        ..SampleConfig::default()
    };
    let mut enc = Vec::new();
    for _ in 0..20 {
        if enc.len() == 5 {
            break;
        }
        if let Ok(s) = sample(&net, &mut rng, &scfg) {
            let depth = min_stack_depth(&s.actions)?;
            enc.push(Encoded {
                tokens: s.tokens,
                actions: s.actions,
                depth,
            });
        }
    }
    if enc.is_empty() {
        return Ok((true, "weights finite; no sample completed to score".into()));
    }
    let d = if wide {
        batched_vs_reference(&model, &enc, 5)?
    } else {
        batched_vs_reference(&ckpt.model::<f32>(), &enc, 5)?
    };
    Ok((d.worst < tol, format!("weights finite; {} sampled sentences, worst relative error {:.2e}", enc.len(), d.worst)))
}
