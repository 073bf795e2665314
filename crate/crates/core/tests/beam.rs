use rnng_core::beam::{batched_beam, enumerate, group_sentences, word_sync_beam, BeamConfig};
use rnng_core::model::reference::Reference;
use rnng_core::model::{Model, ModelConfig};
use rnng_core::stack::valid_actions;
use rnng_core::synth::{random_trees, toy_treebank, toy_vocab, TreeShape};
use rnng_core::treebank::{build_vocab, replay, Action};
use rnng_tensor::{Backend, Eager};

fn toy_model(seed: u64, max_open_nt: usize) -> Model<f64> {
    let mut cfg = ModelConfig::uniform(8, 3, 2);
    cfg.dropout = 0.0;
    cfg.max_open_nt = max_open_nt;
    Model::new(cfg, seed).unwrap().scaled(3.0)
}

fn toy_sentences(n: usize) -> Vec<Vec<u32>> {
    let vocab = toy_vocab();
    toy_treebank(11, n).iter().map(|t| vocab.encode_tokens(&t.leaves())).collect()
}

#[test]
fn schedule_defaults() {
    let c = BeamConfig::with_schedule(100);
    assert_eq!((c.k_w, c.k_s), (10, 1));
    let c = BeamConfig::with_schedule(10);
    assert_eq!((c.k_w, c.k_s), (1, 1));
    assert_eq!((c.token_cap, c.max_structural, c.depth), (250, 40, 100));
}

#[test]
fn token_cap_limits_batches() {
    for g in group_sentences(&[60; 10], 100, 250) {
        assert!(g.len() <= 4);
    }
    assert_eq!(group_sentences(&[300, 5, 5], 10, 250), vec![0..1, 1..3]);
}

#[test]
fn large_beam_matches_exhaustive_enumeration() {
    let model = toy_model(1, 2);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let cfg = BeamConfig::with_schedule(1000);
    for toks in toy_sentences(12) {
        let ex = enumerate(&bk, &model.cfg, &net.p, &toks, cfg.depth, 1_000_000).unwrap();
        // Word beams carry every prefix forward, and the last completion
        // buffer holds every final prefix, so nothing is pruned.
        let (last, inner) = ex.prefixes.split_last().unwrap();
        assert!(inner.iter().all(|&n| n <= cfg.k_w) && *last <= cfg.k, "{:?}", ex.prefixes);
        let got = word_sync_beam(&net, &toks, &cfg).unwrap();
        assert_eq!(got.actions, ex.best_actions);
        assert!((got.log_joint - ex.best_logp).abs() < 1e-5);
        for (a, b) in got.prefix_logp.iter().zip(&ex.prefix_logp) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn unit_beam_is_greedy() {
    let model = toy_model(2, 3);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let cfg = BeamConfig {
        k: 1,
        k_w: 1,
        k_s: 0,
        ..BeamConfig::with_schedule(1)
    };
    let r = Reference::new(&bk, &model.cfg, &net.p);
    let n = model.cfg.n_nts;
    for toks in toy_sentences(10) {
        let mut st = r.initial();
        let (mut acts, mut score) = (Vec::new(), 0.0);
        while !st.closed {
            let legal = r.legal(&st, toks.len(), model.cfg.max_open_nt, cfg.depth);
            let alp = bk.value(&r.action_log_probs(&st).unwrap()).to_f64_vec();
            let wlp = bk.value(&r.word_log_probs(&st).unwrap()).to_f64_vec();
            let mut best = None::<(f64, usize)>;
            for (i, _) in legal.iter().enumerate().filter(|p| *p.1) {
                let s = alp[i] + if i == n { wlp[toks[st.consumed] as usize] } else { 0.0 };
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, i));
                }
            }
            let (s, i) = best.unwrap();
            let a = if i == n { Action::Gen(toks[st.consumed]) } else { Action::from_index(i, n, 0) };
            st = r.apply(&st, &a, None).unwrap();
            acts.push(a);
            score += s;
        }
        let got = word_sync_beam(&net, &toks, &cfg).unwrap();
        assert_eq!(got.actions, acts);
        assert!((got.log_joint - score).abs() < 1e-9);
    }
}

#[test]
fn results_are_well_formed() {
    let trees = random_trees(5, 12, &TreeShape { max_depth: 4, n_words: 8, ..Default::default() });
    let vocab = build_vocab(&trees, 100).unwrap();
    let mut cfg = ModelConfig::uniform(6, vocab.n_words(), vocab.n_nts());
    cfg.max_open_nt = 4;
    let model = Model::<f64>::new(cfg, 3).unwrap();
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let sentences: Vec<Vec<u32>> = trees.iter().map(|t| vocab.encode_tokens(&t.leaves())).collect();
    let beam = BeamConfig::with_schedule(20);
    for (toks, res) in sentences.iter().zip(batched_beam(&net, &sentences, &beam, 4).unwrap()) {
        let tree = replay(&vocab.decode_actions(&res.actions, None)).unwrap();
        let gens: Vec<u32> = res.actions.iter().filter_map(|a| if let Action::Gen(w) = a { Some(*w) } else { None }).collect();
        assert_eq!(&gens, toks);
        assert_eq!(tree.leaves().len(), toks.len());
        assert!(res.log_joint <= 0.0);
        assert!(res.log_joint <= *res.prefix_logp.last().unwrap() + 1e-12);
        assert!(res.prefix_logp.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.surprisal.iter().all(|&s| s >= 0.0));
        // The returned derivation is legal step by step.
        let mut st = rnng_core::stack::init_batch(&bk, 1, beam.depth, model.cfg.stack_dims(), net.initial_state().unwrap()).unwrap();
        for a in &res.actions {
            let mask = valid_actions(&st, &[toks.len()], model.cfg.max_open_nt, model.cfg.n_nts);
            assert!(mask[a.index(model.cfg.n_nts).unwrap()]);
            rnng_core::stack::apply_step(&bk, &mut st, &[*a], &[toks], &net).unwrap();
        }
        assert!(st.finished[0]);
    }
}

#[test]
fn batching_does_not_change_results() {
    let model = toy_model(4, 3);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let sentences = toy_sentences(15);
    let cfg = BeamConfig::with_schedule(30);
    let one = batched_beam(&net, &sentences, &cfg, 1).unwrap();
    let many = batched_beam(&net, &sentences, &cfg, 10).unwrap();
    for (a, b) in one.iter().zip(&many) {
        assert_eq!(a.actions, b.actions);
        assert!((a.log_joint - b.log_joint).abs() < 1e-9);
        for (x, y) in a.prefix_logp.iter().zip(&b.prefix_logp) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn wider_beams_never_score_worse_on_the_toy_grammar() {
    let model = toy_model(6, 2);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    for toks in toy_sentences(10) {
        let narrow = word_sync_beam(&net, &toks, &BeamConfig::with_schedule(10)).unwrap();
        let wide = word_sync_beam(&net, &toks, &BeamConfig::with_schedule(1000)).unwrap();
        assert!(wide.log_joint >= narrow.log_joint - 1e-12);
    }
}

#[test]
fn tight_depth_bound_matches_enumeration() {
    let model = toy_model(7, 3);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    for depth in [3, 4, 5] {
        let cfg = BeamConfig {
            depth,
            ..BeamConfig::with_schedule(1000)
        };
        for toks in toy_sentences(8) {
            let ex = enumerate(&bk, &model.cfg, &net.p, &toks, depth, 1_000_000).unwrap();
            if ex.complete == 0 {
                assert!(word_sync_beam(&net, &toks, &cfg).is_err());
                continue;
            }
            let got = word_sync_beam(&net, &toks, &cfg).unwrap();
            let (last, inner) = ex.prefixes.split_last().unwrap();
            if inner.iter().any(|&n| n > cfg.k_w) || *last > cfg.k {
                // Width pruning applies; the beam can only lose mass.
                assert!(got.prefix_logp.iter().zip(&ex.prefix_logp).all(|(a, b)| *a <= b + 1e-9));
                continue;
            }
            assert_eq!(got.actions, ex.best_actions, "depth {depth}");
            for (a, b) in got.prefix_logp.iter().zip(&ex.prefix_logp) {
                assert!((a - b).abs() < 1e-9, "depth {depth}: {a} vs {b}");
            }
        }
    }
}
