use alloc::vec;
use alloc::vec::Vec;

use crate::param::ParamStore;

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let n = g.len();
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = p.value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -=
                    self.lr * (mh / (libm::sqrt(vh) + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    let mut s = 0.0;
    for (_, p) in store.iter() {
        if let (true, Some(g)) = (p.requires_grad, p.grad.as_ref()) {
            s += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    libm::sqrt(s)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                for x in g.iter_mut() {
                    *x *= k;
                }
            }
        }
    }
    norm
}
