//! Unbatched reference RNNG.
//!
//! One sentence at a time with the stack as a plain vector of elements,
//! each holding its own per-layer LSTM state. Gates are computed one at a
//! time from column slices of the weights, so this path shares nothing with
//! the batched model except the tensor kernels. It serves as the oracle for
//! the batched loss, beam search and sampling.

use rnng_tensor::{Array, Backend, BoundParams, Scalar};

use crate::error::{Error, Result};
use crate::model::{Encoded, ModelConfig};
use crate::treebank::Action;

#[derive(Clone)]
struct Element<T: Clone> {
    /// `(h, c)` per layer, each `1×H`.
    layers: Vec<(T, T)>,
    emb: T,
}

/// Stack contents of one partial derivation.
pub struct RefState<B: Backend> {
    elems: Vec<Element<B::Tensor>>,
    /// Stack positions of open nonterminals.
    open: Vec<usize>,
    /// Tokens generated so far.
    pub consumed: usize,
    pub closed: bool,
}

impl<B: Backend> Clone for RefState<B> {
    fn clone(&self) -> Self {
        Self {
            elems: self.elems.clone(),
            open: self.open.clone(),
            consumed: self.consumed,
            closed: self.closed,
        }
    }
}

impl<B: Backend> RefState<B> {
    pub fn height(&self) -> usize {
        self.elems.len()
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }
}

pub struct Reference<'a, B: Backend> {
    bk: &'a B,
    cfg: &'a ModelConfig,
    p: &'a BoundParams<B>,
}

impl<'a, B: Backend> Reference<'a, B> {
    pub fn new(bk: &'a B, cfg: &'a ModelConfig, p: &'a BoundParams<B>) -> Self {
        Self { bk, cfg, p }
    }

    pub fn bk(&self) -> &'a B {
        self.bk
    }

    fn w(&self, name: &str) -> Result<&B::Tensor> {
        Ok(self.p.get(name)?)
    }

    fn gate(&self, x: &B::Tensor, h: &B::Tensor, prefix: &str, k: usize, width: usize) -> Result<B::Tensor> {
        let bk = self.bk;
        let cols = |t: &B::Tensor| bk.slice(t, k * width, (k + 1) * width);
        let wx = cols(self.w(&format!("{prefix}.w_ih"))?)?;
        let wh = cols(self.w(&format!("{prefix}.w_hh"))?)?;
        let b = cols(&bk.reshape(self.w(&format!("{prefix}.b"))?, &[1, 4 * width])?)?;
        let z = bk.add(&bk.add(&bk.matmul(x, &wx)?, &bk.matmul(h, &wh)?)?, &b)?;
        Ok(z)
    }

    fn cell(&self, x: &B::Tensor, h: &B::Tensor, c: &B::Tensor, prefix: &str, width: usize) -> Result<(B::Tensor, B::Tensor)> {
        let bk = self.bk;
        let i = bk.sigmoid(&self.gate(x, h, prefix, 0, width)?)?;
        let f = bk.sigmoid(&self.gate(x, h, prefix, 1, width)?)?;
        let g = bk.tanh(&self.gate(x, h, prefix, 2, width)?)?;
        let o = bk.sigmoid(&self.gate(x, h, prefix, 3, width)?)?;
        let c2 = bk.add(&bk.mul(&i, &g)?, &bk.mul(&f, c)?)?;
        let h2 = bk.mul(&o, &bk.tanh(&c2)?)?;
        Ok((h2, c2))
    }

    fn initial_layers(&self) -> Result<Vec<(B::Tensor, B::Tensor)>> {
        let bk = self.bk;
        let (l_n, h_n) = (self.cfg.layers, self.cfg.hidden);
        let flat = bk.reshape(self.w("init_state")?, &[1, l_n * 2 * h_n])?;
        (0..l_n)
            .map(|l| {
                let off = 2 * l * h_n;
                Ok((bk.slice(&flat, off, off + h_n)?, bk.slice(&flat, off + h_n, off + 2 * h_n)?))
            })
            .collect()
    }

    pub fn initial(&self) -> RefState<B> {
        RefState {
            elems: Vec::new(),
            open: Vec::new(),
            consumed: 0,
            closed: false,
        }
    }

    fn push(&self, st: &mut RefState<B>, emb: B::Tensor) -> Result<()> {
        let prev = match st.elems.last() {
            Some(e) => e.layers.clone(),
            None => self.initial_layers()?,
        };
        let mut x = emb.clone();
        let mut layers = Vec::with_capacity(prev.len());
        for (l, (h, c)) in prev.iter().enumerate() {
            let (h2, c2) = self.cell(&x, h, c, &format!("stack.l{l}"), self.cfg.hidden)?;
            x = h2.clone();
            layers.push((h2, c2));
        }
        st.elems.push(Element { layers, emb });
        Ok(())
    }

    fn run(&self, seq: &[B::Tensor], prefix: &str) -> Result<B::Tensor> {
        let hc = self.cfg.compose_hidden;
        let mut h = self.bk.constant(Array::zeros(&[1, hc]));
        let mut c = self.bk.constant(Array::zeros(&[1, hc]));
        for x in seq {
            (h, c) = self.cell(x, &h, &c, prefix, hc)?;
        }
        Ok(h)
    }

    fn compose(&self, children: &[B::Tensor]) -> Result<B::Tensor> {
        let bk = self.bk;
        let fwd = self.run(children, "compose.fwd")?;
        let rev: Vec<B::Tensor> = children.iter().rev().cloned().collect();
        let bwd = self.run(&rev, "compose.bwd")?;
        let w = self.w("compose.proj.w")?;
        let hc = self.cfg.compose_hidden;
        let z = bk.add(
            &bk.matmul(&fwd, &bk.reshape(&bk.select(&bk.reshape(w, &[2, hc, self.cfg.emb])?, &[0], None)?, &[hc, self.cfg.emb])?)?,
            &bk.matmul(&bwd, &bk.reshape(&bk.select(&bk.reshape(w, &[2, hc, self.cfg.emb])?, &[1], None)?, &[hc, self.cfg.emb])?)?,
        )?;
        let z = bk.add(&z, &bk.reshape(self.w("compose.proj.b")?, &[1, self.cfg.emb])?)?;
        Ok(bk.tanh(&z)?)
    }

    /// Applies `a`; GEN embeds `token`.
    pub fn apply(&self, st: &RefState<B>, a: &Action, token: Option<u32>) -> Result<RefState<B>> {
        let bk = self.bk;
        let mut next = st.clone();
        let bad = |msg: &str| Error::IllegalAction {
            row: 0,
            action: a.to_string(),
            msg: msg.to_string(),
        };
        match a {
            Action::Nt(x) => {
                let e = bk.select(self.w("nt_emb")?, &[*x as usize], None)?;
                self.push(&mut next, e)?;
                next.open.push(next.elems.len() - 1);
            }
            Action::Gen(w) => {
                if next.open.is_empty() {
                    return Err(bad("no open nonterminal"));
                }
                let w = token.unwrap_or(*w);
                let e = bk.select(self.w("word_emb")?, &[w as usize], None)?;
                self.push(&mut next, e)?;
                next.consumed += 1;
            }
            Action::Reduce => {
                let k = next.open.pop().ok_or_else(|| bad("no open nonterminal"))?;
                if k + 1 == next.elems.len() {
                    return Err(bad("empty constituent"));
                }
                let children: Vec<B::Tensor> = next.elems.drain(k..).map(|e| e.emb).collect();
                let e = self.compose(&children)?;
                self.push(&mut next, e)?;
                next.closed = next.open.is_empty();
            }
            Action::Pad => return Err(bad("PAD")),
        }
        Ok(next)
    }

    fn features(&self, st: &RefState<B>) -> Result<B::Tensor> {
        let bk = self.bk;
        let h = match st.elems.last() {
            Some(e) => e.layers.last().expect("at least one layer").0.clone(),
            None => self.initial_layers()?.pop().expect("at least one layer").0,
        };
        let hm = self.cfg.mlp_hidden;
        let z = bk.add(&bk.matmul(&h, self.w("mlp.w")?)?, &bk.reshape(self.w("mlp.b")?, &[1, hm])?)?;
        Ok(bk.relu(&z)?)
    }

    /// `1×(|N|+2)` action log-probabilities, unmasked.
    pub fn action_log_probs(&self, st: &RefState<B>) -> Result<B::Tensor> {
        let bk = self.bk;
        let m = self.features(st)?;
        let a = self.cfg.n_actions();
        let z = bk.add(&bk.matmul(&m, self.w("action.w")?)?, &bk.reshape(self.w("action.b")?, &[1, a])?)?;
        Ok(bk.log_softmax(&z)?)
    }

    /// `1×V` word log-probabilities.
    pub fn word_log_probs(&self, st: &RefState<B>) -> Result<B::Tensor> {
        let bk = self.bk;
        let m = self.features(st)?;
        let v = self.cfg.n_words;
        let z = if self.cfg.tie_embeddings {
            bk.matmul_nt(&m, self.w("word_emb")?)?
        } else {
            bk.matmul(&m, self.w("word.w")?)?
        };
        Ok(bk.log_softmax(&bk.add(&z, &bk.reshape(self.w("word.b")?, &[1, v])?)?)?)
    }

    /// Legal actions in index order for a sentence of `len` tokens.
    pub fn legal(&self, st: &RefState<B>, len: usize, max_open_nt: usize, depth: usize) -> Vec<bool> {
        let n = self.cfg.n_nts;
        let mut out = vec![false; n + 2];
        if st.closed {
            return out;
        }
        let left = st.consumed < len;
        let height = st.elems.len();
        if left && st.open.len() < max_open_nt && height + 1 < depth {
            out[..n].iter_mut().for_each(|v| *v = true);
        }
        out[n] = left && !st.open.is_empty() && height < depth;
        out[n + 1] = match st.open.last() {
            Some(&k) => k + 1 != height && (st.open.len() > 1 || !left),
            None => false,
        };
        out
    }

    /// Negative log-likelihood of one oracle sequence as a scalar tensor.
    pub fn loss(&self, e: &Encoded) -> Result<B::Tensor> {
        let bk = self.bk;
        let mut st = self.initial();
        let mut total: Option<B::Tensor> = None;
        let mut add = |t: B::Tensor| -> Result<()> {
            total = Some(match total.take() {
                Some(acc) => bk.add(&acc, &t)?,
                None => t,
            });
            Ok(())
        };
        for (step, a) in e.actions.iter().enumerate() {
            let idx = a.index(self.cfg.n_nts).ok_or_else(|| Error::InvalidSequence {
                step,
                msg: "PAD inside an oracle sequence".into(),
            })?;
            add(bk.select(&self.action_log_probs(&st)?, &[0], Some(&[idx]))?)?;
            if let Action::Gen(w) = a {
                add(bk.select(&self.word_log_probs(&st)?, &[0], Some(&[*w as usize]))?)?;
            }
            st = self.apply(&st, a, None)?;
        }
        let total = total.ok_or(Error::Empty("action sequence"))?;
        Ok(bk.scale(&bk.reshape(&total, &[])?, -1.0)?)
    }
}

/// Reference negative log-likelihood as a number.
pub fn reference_nll<B: Backend>(bk: &B, cfg: &ModelConfig, p: &BoundParams<B>, e: &Encoded) -> Result<f64> {
    let t = Reference::new(bk, cfg, p).loss(e)?;
    Ok(bk.value(&t).item()?.as_f64())
}
