//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        OptimState { kind, learning_rate, weight_decay, step: 0, first: zeros(), second }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the `grad` slot of every parameter.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::config("optimizer state was built for a different parameter set"));
        }
        self.step += 1;
        let lr = T::from_f64_lossy(self.learning_rate);
        let wd = T::from_f64_lossy(self.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            let grad = param.grad.take().unwrap_or_else(|| vec![T::zero(); param.numel()]);
            if grad.len() != param.numel() || self.first[i].len() != param.numel() {
                return Err(Error::config(format!("gradient/state shape mismatch for parameter #{i}")));
            }
            let data = param.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64_lossy(momentum);
                    for ((w, &g), v) in data.iter_mut().zip(&grad).zip(self.first[i].iter_mut()) {
                        let g = g + wd * *w;
                        *v = mu * *v + g;
                        *w = *w - lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(self.step as i32));
                    let eps = T::from_f64_lossy(eps);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &g), m), v) in data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
