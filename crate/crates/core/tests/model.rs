use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnng_core::model::reference::{reference_nll, Reference};
use rnng_core::model::{batch_loss, encode_corpus, encode_tree, sample, Model, ModelConfig, SampleConfig};
use rnng_core::stack::ModelHooks;
use rnng_core::synth::{random_trees, TreeShape};
use rnng_core::treebank::{build_vocab, parse_tree, Tree, Vocab};
use rnng_tensor::{Array, Backend, Eager, Tape};

fn setup(trees: &[Tree], dim: usize, seed: u64) -> (Vocab, Model<f64>) {
    let vocab = build_vocab(trees, 1000).unwrap();
    let mut cfg = ModelConfig::uniform(dim, vocab.n_words(), vocab.n_nts());
    cfg.dropout = 0.0;
    (vocab.clone(), Model::new(cfg, seed).unwrap())
}

#[test]
fn uniform_model_scores_three_ln_three() {
    let tree = parse_tree("(NP dog)").unwrap();
    let vocab = build_vocab(std::slice::from_ref(&tree), 1).unwrap();
    // Only the word itself plus the UNK fallback would make V = 2, so use a
    // vocabulary of exactly one word.
    let mut cfg = ModelConfig::uniform(4, 1, 1);
    cfg.dropout = 0.0;
    let model = Model::<f64>::zeros(cfg).unwrap();
    let mut e = encode_tree(&vocab, &tree).unwrap();
    e.tokens = vec![0];
    e.actions[1] = rnng_core::treebank::Action::Gen(0);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let out = batch_loss(&net, &[&e], None).unwrap();
    let want = 3.0 * 3f64.ln();
    assert!((out.per_sentence[0] - want).abs() < 1e-12);
    assert!((bk.value(&out.total).item().unwrap() - want).abs() < 1e-12);
    let p = model.params.bind(&bk);
    assert!((reference_nll(&bk, &model.cfg, &p, &e).unwrap() - want).abs() < 1e-12);
}

#[test]
fn zero_weights_give_uniform_actions_and_softmax_gradient() {
    let mut cfg = ModelConfig::uniform(4, 3, 26);
    cfg.dropout = 0.0;
    let model = Model::<f64>::zeros(cfg).unwrap();
    let tape = Tape::<f64>::new();
    let net = model.net(&tape, false, 0);
    let st = Reference::new(&tape, &model.cfg, &net.p).initial();
    let lp = Reference::new(&tape, &model.cfg, &net.p).action_log_probs(&st).unwrap();
    for v in tape.value(&lp).data() {
        assert!((v.exp() - 1.0 / 28.0).abs() < 1e-12);
    }
    // d(-log softmax(z)[gold]) / dz = softmax - onehot, seen through b_a.
    let gold = 5;
    let nll = tape.scale(&tape.select(&lp, &[0], Some(&[gold])).unwrap(), -1.0).unwrap();
    let nll = tape.reshape(&nll, &[]).unwrap();
    let g = tape.backward(nll).unwrap();
    let gb = g.get("action.b").unwrap();
    for (i, v) in gb.data().iter().enumerate() {
        let want = 1.0 / 28.0 - if i == gold { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-12);
    }
    // Shifting every action bias leaves the distribution unchanged.
    let mut shifted = model.clone();
    shifted.params.get_mut("action.b").unwrap().data_mut().iter_mut().for_each(|v| *v += 3.5);
    let bk = Eager::<f64>::new();
    let p = shifted.params.bind(&bk);
    let r = Reference::new(&bk, &shifted.cfg, &p);
    let lp = r.action_log_probs(&r.initial()).unwrap();
    assert!(lp.data().iter().all(|v| (v.exp() - 1.0 / 28.0).abs() < 1e-12));
}

#[test]
fn batched_loss_matches_reference() {
    let trees = random_trees(7, 40, &TreeShape::default());
    let (vocab, model) = setup(&trees, 6, 1);
    let enc = encode_corpus(&vocab, &trees).unwrap();
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let batch: Vec<_> = enc.iter().collect();
    let out = batch_loss(&net, &batch, None).unwrap();
    let mut sum = 0.0;
    for (e, got) in enc.iter().zip(&out.per_sentence) {
        let want = reference_nll(&bk, &model.cfg, &net.p, e).unwrap();
        assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        sum += want;
    }
    let total = bk.value(&out.total).item().unwrap();
    assert!(((total - sum) / sum).abs() < 1e-9);
}

#[test]
fn duplicate_sentence_doubles_its_contribution() {
    let trees = random_trees(8, 3, &TreeShape::default());
    let (vocab, model) = setup(&trees, 5, 2);
    let enc = encode_corpus(&vocab, &trees).unwrap();
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let one = batch_loss(&net, &[&enc[0], &enc[1]], None).unwrap();
    let two = batch_loss(&net, &[&enc[0], &enc[1], &enc[0]], None).unwrap();
    let (a, b) = (bk.value(&one.total).item().unwrap(), bk.value(&two.total).item().unwrap());
    assert!((b - a - one.per_sentence[0]).abs() < 1e-10);
    // Batch order does not matter.
    let swapped = batch_loss(&net, &[&enc[1], &enc[0]], None).unwrap();
    assert!((bk.value(&swapped.total).item().unwrap() - a).abs() < 1e-12);
}

#[test]
fn batched_gradients_match_reference() {
    let trees = random_trees(9, 4, &TreeShape { max_depth: 3, ..Default::default() });
    let (vocab, model) = setup(&trees, 4, 3);
    let enc = encode_corpus(&vocab, &trees).unwrap();
    let tape = Tape::<f64>::new();
    let net = model.net(&tape, false, 0);
    let batch: Vec<_> = enc.iter().collect();
    let g1 = tape.backward(batch_loss(&net, &batch, None).unwrap().total).unwrap();
    let tape2 = Tape::<f64>::new();
    let p2 = model.params.bind(&tape2);
    let r = Reference::new(&tape2, &model.cfg, &p2);
    let mut total = r.loss(&enc[0]).unwrap();
    for e in &enc[1..] {
        total = tape2.add(&total, &r.loss(e).unwrap()).unwrap();
    }
    let g2 = tape2.backward(total).unwrap();
    for (name, a) in g1.iter() {
        let b = g2.get(name).unwrap();
        let diff = a.max_abs_diff(b).unwrap();
        assert!(diff < 1e-9, "{name}: {diff}");
    }
}

fn net_compose(model: &Model<f64>, children: &Array<f64>, lengths: &[usize]) -> Array<f64> {
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    (*net.compose(&bk, &Arc::new(children.clone()), lengths).unwrap()).clone()
}

#[test]
fn composition_ignores_padding_and_matches_rows() {
    let cfg = {
        let mut c = ModelConfig::uniform(5, 4, 2);
        c.compose_hidden = 3;
        c
    };
    let model = Model::<f64>::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lengths = [3, 1, 4, 2];
    let (r, k, e) = (4, 4, 5);
    let mut data: Vec<f64> = (0..r * k * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for (row, &n) in lengths.iter().enumerate() {
        for t in n..k {
            for j in 0..e {
                data[(row * k + t) * e + j] = 0.0;
            }
        }
    }
    let base = net_compose(&model, &Array::from_f64(&[r, k, e], &data).unwrap(), &lengths);
    let mut noisy = data.clone();
    for (row, &n) in lengths.iter().enumerate() {
        for t in n..k {
            for j in 0..e {
                noisy[(row * k + t) * e + j] = rng.gen_range(-50.0..50.0);
            }
        }
    }
    let again = net_compose(&model, &Array::from_f64(&[r, k, e], &noisy).unwrap(), &lengths);
    assert!(base.max_abs_diff(&again).unwrap() <= 1e-12);
    for (row, &n) in lengths.iter().enumerate() {
        let one = Array::from_f64(&[1, n, e], &data[row * k * e..(row * k + n) * e]).unwrap();
        let single = net_compose(&model, &one, &[n]);
        let diff: f64 = single
            .data()
            .iter()
            .zip(base.row(row))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn sampling_is_self_consistent() {
    let trees = random_trees(10, 20, &TreeShape { max_depth: 3, n_words: 6, ..Default::default() });
    let (vocab, model) = setup(&trees, 6, 5);
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let cfg = SampleConfig {
        max_open_nt: 3,
        max_actions: 200,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..20 {
        let Ok(s) = sample(&net, &mut rng, &cfg) else { continue };
        let tree = s.tree(&vocab).unwrap();
        let e = rnng_core::model::Encoded {
            tokens: s.tokens.clone(),
            actions: s.actions.clone(),
            depth: rnng_core::treebank::min_stack_depth(&s.actions).unwrap(),
        };
        let nll = reference_nll(&bk, &model.cfg, &net.p, &e).unwrap();
        assert!((s.log_prob + nll).abs() < 1e-9, "{} vs {}", s.log_prob, -nll);
        assert_eq!(tree.leaves().len(), s.tokens.len());
        checked += 1;
    }
    assert!(checked > 5);
    let greedy = SampleConfig {
        temperature: 0.0,
        ..cfg.clone()
    };
    let a = sample(&net, &mut rng, &greedy);
    let b = sample(&net, &mut rng, &greedy);
    assert_eq!(a.map(|s| s.actions).ok(), b.map(|s| s.actions).ok());
}

#[test]
fn single_label_single_word_model_forces_flat_trees() {
    let mut cfg = ModelConfig::uniform(4, 1, 1);
    cfg.dropout = 0.0;
    let model = Model::<f64>::new(cfg, 6).unwrap();
    let bk = Eager::<f64>::new();
    let net = model.net(&bk, false, 0);
    let sc = SampleConfig {
        max_open_nt: 1,
        ..Default::default()
    };
    let vocab = Vocab {
        words: {
            let mut t = rnng_core::treebank::SymbolTable::new();
            t.add("a", 1);
            t
        },
        nts: {
            let mut t = rnng_core::treebank::SymbolTable::new();
            t.add("X", 1);
            t
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let s = sample(&net, &mut rng, &sc).unwrap();
        let t = s.tree(&vocab).unwrap();
        let n = t.leaves().len();
        assert_eq!(t.to_string(), format!("(X{})", " a".repeat(n)));
    }
}
