//! Adaptive-gradient-accumulation (recommendation model) and adaptive-moment
//! (gate classifiers) optimizers over a [`ParamStore`].
//!
//! Table parameters are updated lazily: only rows present in the gradient
//! are touched, matching sparse embedding updates.

use crate::params::{Grads, ParamStore};

fn for_each_touched(store: &mut ParamStore, grads: &Grads, mut f: impl FnMut(usize, &mut [f64], &[f64], usize)) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if let Some(dense) = grads.dense(id) {
            f(id.index(), &mut store.get_mut(id).data, dense, 0);
        } else if let Some(rows) = grads.rows(id) {
            let cols = store.get(id).cols;
            for (&row, g) in rows {
                let t = store.get_mut(id);
                f(id.index(), t.row_mut(row), g, row * cols);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accum: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let accum = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { lr, eps: 1e-10, accum }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let (lr, eps) = (self.lr, self.eps);
        let accum = &mut self.accum;
        for_each_touched(store, grads, |pid, param, grad, offset| {
            let acc = &mut accum[pid][offset..offset + param.len()];
            for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
                *a += g * g;
                *p -= lr * g / (a.sqrt() + eps);
            }
        });
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        for_each_touched(store, grads, |pid, param, grad, offset| {
            let n = param.len();
            let m = &mut ms[pid][offset..offset + n];
            let v = &mut vs[pid][offset..offset + n];
            for k in 0..n {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                param[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        });
    }
}

/// Step decay: at the end of every `every`-th epoch the rate is multiplied
/// by `decay`.
pub fn apply_lr_decay(lr: f64, epoch: usize, every: usize, decay: f64) -> f64 {
    if every > 0 && epoch > 0 && epoch % every == 0 {
        lr * decay
    } else {
        lr
    }
}
