//! Reverse-mode gradients against central finite differences (64-bit).

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnng_tensor::{Array, Backend, Eager, ParamSet, Tape, TensorError};

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

type Graph = fn(&Tape<f64>, &[rnng_tensor::NodeId]) -> rnng_tensor::Result<rnng_tensor::NodeId>;
type EagerGraph = fn(&Eager<f64>, &[Arc<Array<f64>>]) -> rnng_tensor::Result<Arc<Array<f64>>>;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest violation of |analytic - numeric| <= tol * max(|a|, |n|) + 1e-8.
fn check(inputs: &[Array<f64>], taped: Graph, eager: EagerGraph) -> f64 {
    let tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let loss = taped(&tape, &ids).unwrap();
    let grads = tape.backward(loss).unwrap();
    let be = Eager::new();
    let eval = |xs: &[Array<f64>]| {
        let ts: Vec<_> = xs.iter().map(|x| Arc::new(x.clone())).collect();
        eager(&be, &ts).unwrap().item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Array::zeros(input.shape());
        let analytic = grads.wrt(ids[i]).unwrap_or(&zeros);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let excess = (a - numeric).abs() - (REL_TOL * a.abs().max(numeric.abs()) + 1e-8);
            worst = worst.max(excess);
        }
    }
    worst
}

macro_rules! graph {
    ($name:ident, |$b:ident, $x:ident| $body:block) => {
        mod $name {
            use super::*;
            pub fn run<B: Backend<Elem = f64>>($b: &B, $x: &[B::Tensor]) -> rnng_tensor::Result<B::Tensor> $body
            #[allow(dead_code)]
            pub fn taped(t: &Tape<f64>, x: &[rnng_tensor::NodeId]) -> rnng_tensor::Result<rnng_tensor::NodeId> {
                run(t, x)
            }
            #[allow(dead_code)]
            pub fn eager(e: &Eager<f64>, x: &[Arc<Array<f64>>]) -> rnng_tensor::Result<Arc<Array<f64>>> {
                run(e, x)
            }
        }
    };
}

graph!(square, |b, x| { let y = b.mul(&x[0], &x[0])?; b.sum(&y) });

// sum(softmax(W x) * t)
graph!(softmax_dot, |b, x| {
    let logits = b.matmul(&x[0], &x[1])?;
    let p = b.softmax(&logits)?;
    let weighted = b.mul(&p, &x[2])?;
    b.sum(&weighted)
});

// A small LSTM-like cell followed by log-softmax NLL of fixed targets.
graph!(cell, |b, x| {
    let (h, w, bias) = (&x[0], &x[1], &x[2]);
    let z = b.add_bias(&b.matmul(h, w)?, bias)?;
    let i = b.sigmoid(&b.slice(&z, 0, 3)?)?;
    let g = b.tanh(&b.slice(&z, 3, 6)?)?;
    let c = b.mul(&i, &g)?;
    let hid = b.concat(&[b.relu(&c)?, b.tanh(&c)?])?;
    let lp = b.log_softmax(&hid)?;
    let picked = b.select(&lp, &[0, 1, 2], Some(&[1, 4, 0]))?;
    let lse = b.logsumexp(&hid)?;
    let total = b.sub(&b.sum(&lse)?, &b.sum(&picked)?)?;
    b.scale(&total, 0.5)
});

// Indexed reads and writes through a rank-3 stack tensor.
graph!(stack_ops, |b, x| {
    let (stack, v) = (&x[0], &x[1]);
    let read = b.select(stack, &[0, 2, 1], Some(&[1, 0, 2]))?;
    let mixed = b.tanh(&b.add(&read, v)?)?;
    let written = b.assign(stack.clone(), &[2, 0], Some(&[2, 1]), &b.select(&mixed, &[0, 1], None)?)?;
    let flat = b.reshape(&written, &[3, 3 * 2])?;
    let padded = b.pad_rows(&flat, 5)?;
    let rows = b.select(&padded, &[0, 1, 2, 4], None)?;
    b.sum(&b.mul(&rows, &rows)?)
});

// Embedding lookup with a tied output projection.
graph!(tied, |b, x| {
    let (emb, hidden) = (&x[0], &x[1]);
    let looked = b.select(emb, &[2, 0, 2], None)?;
    let h = b.tanh(&b.add(&looked, hidden)?)?;
    let logits = b.matmul_nt(&h, emb)?;
    let lp = b.log_softmax(&logits)?;
    let picked = b.select(&lp, &[0, 1, 2], Some(&[1, 1, 3]))?;
    b.scale(&b.sum(&picked)?, -1.0)
});

#[test]
fn square_gradient_is_two_x() {
    let tape = Tape::new();
    let x = tape.var(Array::scalar(3.0));
    let loss = square::run(&tape, &[x]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn softmax_weighted_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[3, 4]), random(&mut rng, &[2, 4])];
    assert!(check(&inputs, softmax_dot::taped, softmax_dot::eager) <= 0.0);
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Array::from_f64(&[1, 8], &[1.0; 8]).unwrap());
    let d = tape.dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let loss = tape.sum(&d).unwrap();
    let g = tape.backward(loss).unwrap();
    let out = tape.value(&d);
    assert_eq!(g.wrt(x).unwrap().data(), out.data());
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut params = ParamSet::<f64>::new();
    params.insert("used", Array::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    params.insert("unused", Array::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = tape.sum(bound.get("used").unwrap()).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get("used").unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Array::zeros(&[2]));
    assert_eq!(tape.backward(x).err(), Some(TensorError::NotScalar(vec![2])));
}

#[test]
fn select_gradient_counts_selections() {
    let tape = Tape::new();
    let a = tape.var(Array::<f64>::zeros(&[2, 3]));
    let s = tape.select(&a, &[0, 1, 0, 0], Some(&[2, 0, 2, 1])).unwrap();
    let loss = tape.sum(&s).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composed_graphs_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell_inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 6]), random(&mut rng, &[6])];
        prop_assert!(check(&cell_inputs, cell::taped, cell::eager) <= 0.0);
        let stack_inputs = [random(&mut rng, &[3, 3, 2]), random(&mut rng, &[3, 2])];
        prop_assert!(check(&stack_inputs, stack_ops::taped, stack_ops::eager) <= 0.0);
        let tied_inputs = [random(&mut rng, &[4, 3]), random(&mut rng, &[3, 3])];
        prop_assert!(check(&tied_inputs, tied::taped, tied::eager) <= 0.0);
    }

    #[test]
    fn assign_then_select_is_identity(rows in proptest::sample::subsequence((0..6usize).collect::<Vec<_>>(), 0..6),
                                      seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random(&mut rng, &[6, 4]);
        let v = random(&mut rng, &[rows.len(), 4]);
        let mut a = base.clone();
        rnng_tensor::kernels::assign_in_place(&mut a, &rows, None, &v).unwrap();
        prop_assert_eq!(rnng_tensor::kernels::select(&a, &rows, None).unwrap(), v);
        for r in (0..6).filter(|r| !rows.contains(r)) {
            prop_assert_eq!(a.row(r), base.row(r));
        }
    }

    #[test]
    fn softmax_rows_normalize(seed in any::<u64>(), cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[5, cols]).map(|v| v * 30.0);
        let p = rnng_tensor::kernels::softmax(&x).unwrap();
        let lse = rnng_tensor::kernels::logsumexp(&x).unwrap();
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            let max = x.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse.data()[r] >= max);
        }
    }
}
