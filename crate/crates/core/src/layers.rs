//! Activations and the dense layer shared by every branch.

use std::ops::Range;

use rand::Rng;

use crate::linalg::{axpy, dot};
use crate::params::{Grads, ParamId, ParamKind, ParamStore, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-ln σ(x)`.
#[inline]
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Which slices of a dense layer's input need a gradient.
#[derive(Debug, Clone, Copy)]
pub enum InputGrad<'a> {
    None,
    All,
    Ranges(&'a [Range<usize>]),
}

/// Fully connected layer `y = W x + b`, weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Dense,
            Tensor::xavier(out_dim, in_dim, rng),
        );
        let bias = with_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Dense,
                Tensor::zeros(1, out_dim),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = store.get(self.weight);
        let mut y: Vec<f64> = match self.bias {
            Some(b) => store.get(b).data.clone(),
            None => vec![0.0; self.out_dim],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += dot(w.row(o), x);
        }
        y
    }

    /// Accumulates `dW += g xᵀ`, `db += g` and returns `Wᵀ g` on the requested
    /// input slices (zeros elsewhere; empty vector for [`InputGrad::None`]).
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut Grads,
        input_grad: InputGrad<'_>,
    ) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.out_dim);
        if let Some(b) = self.bias {
            axpy(1.0, grad_out, grads.dense_mut(b));
        }
        grads.add_outer(self.weight, grad_out, x);
        let w = store.get(self.weight);
        match input_grad {
            InputGrad::None => Vec::new(),
            InputGrad::All => {
                let mut dx = vec![0.0; self.in_dim];
                for (o, &g) in grad_out.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, w.row(o), &mut dx);
                    }
                }
                dx
            }
            InputGrad::Ranges(ranges) => {
                let mut dx = vec![0.0; self.in_dim];
                for (o, &g) in grad_out.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = w.row(o);
                    for r in ranges {
                        axpy(g, &row[r.clone()], &mut dx[r.clone()]);
                    }
                }
                dx
            }
        }
    }

    /// `W[:, cols] x_j` for every `x_j`, sweeping each weight row once.
    pub fn partial_many(&self, store: &ParamStore, cols: Range<usize>, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let w = store.get(self.weight);
        let mut out = vec![vec![0.0; self.out_dim]; xs.len()];
        for o in 0..self.out_dim {
            let row = &w.row(o)[cols.clone()];
            for (x, y) in xs.iter().zip(out.iter_mut()) {
                y[o] = dot(row, x);
            }
        }
        out
    }

    /// Batched [`Dense::forward`].
    pub fn forward_many(&self, store: &ParamStore, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let mut out = self.partial_many(store, 0..self.in_dim, xs);
        if let Some(b) = self.bias {
            let b = &store.get(b).data;
            for y in &mut out {
                axpy(1.0, b, y);
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Dense layer followed by LeakyReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakyDense {
    pub dense: Dense,
}

impl LeakyDense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dense: Dense::new(store, name, in_dim, out_dim, true, rng),
        }
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.dense.forward(store, x);
        let out = pre.iter().map(|&z| leaky_relu(z)).collect();
        (pre, out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        pre: &[f64],
        grad_out: &[f64],
        grads: &mut Grads,
        input_grad: InputGrad<'_>,
    ) -> Vec<f64> {
        let g: Vec<f64> = grad_out
            .iter()
            .zip(pre)
            .map(|(&go, &z)| go * leaky_relu_grad(z))
            .collect();
        self.dense.backward(store, x, &g, grads, input_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn activations_reference_values() {
        assert_eq!(leaky_relu(2.0), 2.0);
        assert_eq!(leaky_relu(-2.0), -0.02);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(neg_log_sigmoid(-800.0).is_finite());
        assert!(sigmoid(-800.0) >= 0.0);
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(softmax(&[1000.0, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dense_backward_ranges_match_full() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "t");
        let layer = Dense::new(&mut store, "d", 5, 3, true, &mut r);
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        let g = [1.0, -2.0, 0.5];
        let mut grads = Grads::new(&store);
        let full = layer.backward(&store, &x, &g, &mut grads, InputGrad::All);
        let part = layer.backward(
            &store,
            &x,
            &g,
            &mut grads,
            InputGrad::Ranges(&[0..2, 4..5]),
        );
        assert_eq!(part[0], full[0]);
        assert_eq!(part[1], full[1]);
        assert_eq!(part[2], 0.0);
        assert_eq!(part[4], full[4]);
    }
}
