use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// RMSprop with squared-gradient smoothing `rho` and denominator offset `eps`:
/// `v <- rho v + (1 - rho) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmsprop<S> {
    pub rho: f64,
    pub eps: f64,
    /// One accumulator per store entry (empty for frozen entries).
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Rmsprop<S> {
    pub fn new(store: &ParamStore<S>, rho: f64, eps: f64) -> Self {
        let v = store
            .entries()
            .iter()
            .map(|e| if e.trainable { vec![S::zero(); e.tensor.numel()] } else { Vec::new() })
            .collect();
        Self { rho, eps, v }
    }

    /// Applies one update; `grads[i]` is `None` for entries without a gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Vec<S>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.v.len() != store.len() {
            return Err(invalid!("optimizer state does not match the parameter store"));
        }
        let (rho, eps, lr) = (S::lit(self.rho), S::lit(self.eps), S::lit(lr));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let v = &mut self.v[i];
            let p = store.tensor_mut(i).data_mut();
            if g.len() != p.len() || v.len() != p.len() {
                return Err(invalid!("gradient {i} has {} values for {} parameters", g.len(), p.len()));
            }
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = rho * *v + (S::one() - rho) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}
