use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created lazily the
/// first time a parameter receives a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            if store.get(id).shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    detail: format!(
                        "{}: param {:?} vs grad {:?}",
                        store.name(id),
                        store.get(id).shape(),
                        g.shape()
                    ),
                });
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
