use std::collections::HashMap;

use rnng_tensor::{Array, Gradients, ParamSet, Scalar};

use crate::error::{Error, Result};

/// First and second moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<String, Array<T>>,
    v: HashMap<String, Array<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update, `θ ← θ − lr·m̂/(√v̂ + ε)`. Nothing
    /// changes if any gradient is non-finite. With `clip`, gradients are
    /// first rescaled to that global L2 norm at most.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64, clip: Option<f64>) -> Result<()> {
        let mut sq = 0.0;
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                    step: self.step as usize,
                });
            }
            sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let factor = match clip {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| Array::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Array::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = gi.as_f64() * factor;
                let m2 = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let v2 = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = T::of(m2);
                *vi = T::of(v2);
                let step = lr * (m2 / c1) / ((v2 / c2).sqrt() + self.eps);
                *pi = T::of(pi.as_f64() - step);
            }
        }
        Ok(())
    }
}
