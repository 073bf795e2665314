use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnng_tensor::{Array, Backend, BoundParams};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::stack::ModelHooks;

/// One LSTM step over a batch of rows with gates ordered `i, f, g, o`.
pub fn lstm_cell<B: Backend>(
    bk: &B,
    x: &B::Tensor,
    h: &B::Tensor,
    c: &B::Tensor,
    w_ih: &B::Tensor,
    w_hh: &B::Tensor,
    bias: &B::Tensor,
) -> Result<(B::Tensor, B::Tensor)> {
    let width = bk.shape(w_hh)[0];
    let gates = bk.add_bias(&bk.add(&bk.matmul(x, w_ih)?, &bk.matmul(h, w_hh)?)?, bias)?;
    let i = bk.sigmoid(&bk.slice(&gates, 0, width)?)?;
    let f = bk.sigmoid(&bk.slice(&gates, width, 2 * width)?)?;
    let g = bk.tanh(&bk.slice(&gates, 2 * width, 3 * width)?)?;
    let o = bk.sigmoid(&bk.slice(&gates, 3 * width, 4 * width)?)?;
    let c = bk.add(&bk.mul(&f, c)?, &bk.mul(&i, &g)?)?;
    let h = bk.mul(&o, &bk.tanh(&c)?)?;
    Ok((h, c))
}

/// Parameters bound to a backend, plus the dropout switch and its
/// generator. Implements the stack-machine callbacks and the output heads.
pub struct Net<'a, B: Backend> {
    pub bk: &'a B,
    pub cfg: &'a ModelConfig,
    pub p: BoundParams<B>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a, B: Backend> Net<'a, B> {
    pub fn new(bk: &'a B, cfg: &'a ModelConfig, p: BoundParams<B>, train: bool, seed: u64) -> Self {
        Self {
            bk,
            cfg,
            p,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn drop(&self, x: &B::Tensor) -> Result<B::Tensor> {
        if self.train && self.cfg.dropout > 0.0 {
            Ok(self.bk.dropout(x, self.cfg.dropout, &mut *self.rng.borrow_mut())?)
        } else {
            Ok(x.clone())
        }
    }

    /// Hidden layer shared by both heads: `n×H` to `n×H_m`.
    pub fn mlp(&self, h: &B::Tensor) -> Result<B::Tensor> {
        let bk = self.bk;
        let z = bk.add_bias(&bk.matmul(h, self.p.get("mlp.w")?)?, self.p.get("mlp.b")?)?;
        self.drop(&bk.relu(&z)?)
    }

    /// Unnormalised scores over the `|N|+2` actions.
    pub fn action_logits(&self, m: &B::Tensor) -> Result<B::Tensor> {
        let bk = self.bk;
        Ok(bk.add_bias(&bk.matmul(m, self.p.get("action.w")?)?, self.p.get("action.b")?)?)
    }

    /// Unnormalised scores over the vocabulary.
    pub fn word_logits(&self, m: &B::Tensor) -> Result<B::Tensor> {
        let bk = self.bk;
        let z = if self.cfg.tie_embeddings {
            bk.matmul_nt(m, self.p.get("word_emb")?)?
        } else {
            bk.matmul(m, self.p.get("word.w")?)?
        };
        Ok(bk.add_bias(&z, self.p.get("word.b")?)?)
    }

    pub fn initial_state(&self) -> Result<&B::Tensor> {
        Ok(self.p.get("init_state")?)
    }

    fn bilstm_pass(&self, dir: &str, children: &B::Tensor, lengths: &[usize], reverse: bool) -> Result<B::Tensor> {
        let bk = self.bk;
        let n = lengths.len();
        let hc = self.cfg.compose_hidden;
        let (w_ih, w_hh, b) = (
            self.p.get(&format!("compose.{dir}.w_ih"))?,
            self.p.get(&format!("compose.{dir}.w_hh"))?,
            self.p.get(&format!("compose.{dir}.b"))?,
        );
        let mut h = bk.constant(Array::zeros(&[n, hc]));
        let mut c = bk.constant(Array::zeros(&[n, hc]));
        let kmax = lengths.iter().copied().max().unwrap_or(0);
        for t in 0..kmax {
            let active: Vec<usize> = (0..n).filter(|&r| lengths[r] > t).collect();
            let cols: Vec<usize> = active
                .iter()
                .map(|&r| if reverse { lengths[r] - 1 - t } else { t })
                .collect();
            let x = bk.select(children, &active, Some(&cols))?;
            if active.len() == n {
                (h, c) = lstm_cell(bk, &x, &h, &c, w_ih, w_hh, b)?;
            } else {
                let hp = bk.select(&h, &active, None)?;
                let cp = bk.select(&c, &active, None)?;
                let (h2, c2) = lstm_cell(bk, &x, &hp, &cp, w_ih, w_hh, b)?;
                h = bk.assign(h, &active, None, &h2)?;
                c = bk.assign(c, &active, None, &c2)?;
            }
        }
        Ok(h)
    }
}

impl<B: Backend> ModelHooks<B> for Net<'_, B> {
    fn word_emb(&self, bk: &B, tokens: &[u32]) -> Result<B::Tensor> {
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(bk.select(self.p.get("word_emb")?, &rows, None)?)
    }

    fn nt_emb(&self, bk: &B, nts: &[u32]) -> Result<B::Tensor> {
        let rows: Vec<usize> = nts.iter().map(|&t| t as usize).collect();
        Ok(bk.select(self.p.get("nt_emb")?, &rows, None)?)
    }

    fn compose(&self, bk: &B, children: &B::Tensor, lengths: &[usize]) -> Result<B::Tensor> {
        if let Some(r) = lengths.iter().position(|&l| l == 0) {
            return Err(crate::Error::State {
                row: r,
                msg: "composition of an empty span".into(),
            });
        }
        let fwd = self.bilstm_pass("fwd", children, lengths, false)?;
        let bwd = self.bilstm_pass("bwd", children, lengths, true)?;
        let z = bk.matmul(&bk.concat(&[fwd, bwd])?, self.p.get("compose.proj.w")?)?;
        Ok(bk.tanh(&bk.add_bias(&z, self.p.get("compose.proj.b")?)?)?)
    }

    fn recur(&self, bk: &B, prev: &B::Tensor, input: &B::Tensor) -> Result<B::Tensor> {
        let (l_n, h_n) = (self.cfg.layers, self.cfg.hidden);
        let n = bk.shape(prev)[0];
        let flat = bk.reshape(prev, &[n, l_n * 2 * h_n])?;
        let mut x = input.clone();
        let mut parts = Vec::with_capacity(2 * l_n);
        for l in 0..l_n {
            let off = l * 2 * h_n;
            let h = bk.slice(&flat, off, off + h_n)?;
            let c = bk.slice(&flat, off + h_n, off + 2 * h_n)?;
            if l > 0 {
                x = self.drop(&x)?;
            }
            let (h2, c2) = lstm_cell(
                bk,
                &x,
                &h,
                &c,
                self.p.get(&format!("stack.l{l}.w_ih"))?,
                self.p.get(&format!("stack.l{l}.w_hh"))?,
                self.p.get(&format!("stack.l{l}.b"))?,
            )?;
            x = h2.clone();
            parts.push(h2);
            parts.push(c2);
        }
        Ok(bk.reshape(&bk.concat(&parts)?, &[n, l_n, 2, h_n])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rnng_tensor::Eager;
    use std::sync::Arc;

    type E = Eager<f64>;

    fn arr(shape: &[usize], v: &[f64]) -> Arc<Array<f64>> {
        Arc::new(Array::from_f64(shape, v).unwrap())
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let bk = E::new();
        let z = |s: &[usize]| Arc::new(Array::<f64>::zeros(s));
        let x = arr(&[1, 3], &[1.0, -2.0, 3.0]);
        let (h, _) = lstm_cell(&bk, &x, &z(&[1, 2]), &z(&[1, 2]), &z(&[3, 8]), &z(&[2, 8]), &z(&[8])).unwrap();
        assert_eq!(h.data(), [0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let bk = E::new();
        let z = |s: &[usize]| Arc::new(Array::<f64>::zeros(s));
        let c_prev = arr(&[1, 1], &[0.7]);
        // i → 0, f → 1.
        let bias = arr(&[4], &[-60.0, 60.0, 0.0, 0.0]);
        let (_, c) = lstm_cell(&bk, &z(&[1, 1]), &z(&[1, 1]), &c_prev, &z(&[1, 4]), &z(&[1, 4]), &bias).unwrap();
        assert!((c.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n_in, n_h) = (4, 4);
        let x = rand_vec(&mut rng, n_in);
        let h = rand_vec(&mut rng, n_h);
        let c = rand_vec(&mut rng, n_h);
        let w_ih = rand_vec(&mut rng, n_in * 4 * n_h);
        let w_hh = rand_vec(&mut rng, n_h * 4 * n_h);
        let b = rand_vec(&mut rng, 4 * n_h);
        let bk = E::new();
        let (h2, c2) = lstm_cell(
            &bk,
            &arr(&[1, n_in], &x),
            &arr(&[1, n_h], &h),
            &arr(&[1, n_h], &c),
            &arr(&[n_in, 4 * n_h], &w_ih),
            &arr(&[n_h, 4 * n_h], &w_hh),
            &arr(&[4 * n_h], &b),
        )
        .unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for (j, &cj_prev) in c.iter().enumerate() {
            let gate = |k: usize| {
                let col = k * n_h + j;
                b[col]
                    + (0..n_in).map(|t| x[t] * w_ih[t * 4 * n_h + col]).sum::<f64>()
                    + (0..n_h).map(|t| h[t] * w_hh[t * 4 * n_h + col]).sum::<f64>()
            };
            let cj = sig(gate(1)) * cj_prev + sig(gate(0)) * gate(2).tanh();
            let hj = sig(gate(3)) * cj.tanh();
            assert!((c2.data()[j] - cj).abs() < 1e-10);
            assert!((h2.data()[j] - hj).abs() < 1e-10);
        }
    }
}
