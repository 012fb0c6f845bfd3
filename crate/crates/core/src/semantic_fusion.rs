//! Semantic feature `s_i` from the inferred feature `c_i` and the encoded
//! annotation `ŝ_i`.
//!
//! The pair is read as a two-token sequence: both vectors are projected to
//! the LSTM input width and fed in order `[c_i, ŝ_i]` from a zero state; the
//! final hidden state is `s_i`. When annotations are withheld the second
//! token is a learned placeholder.

use rand::Rng;

use crate::error::{check_len, Result};
use crate::layers::{sigmoid, Dense, InputGrad};
use crate::linalg::axpy;
use crate::params::{Grads, ParamId, ParamKind, ParamStore, Tensor};
use crate::representations::{encode_privileged, encode_privileged_backward, EmbeddingTable};

/// Single-layer LSTM cell, gate order `i, f, g, o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    /// `4h × input` with the shared bias.
    pub input: Dense,
    /// `4h × h`, no bias.
    pub recurrent: Dense,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input: Dense::new(store, &format!("{name}.w_ih"), input, 4 * hidden, true, rng),
            recurrent: Dense::new(store, &format!("{name}.w_hh"), hidden, 4 * hidden, false, rng),
            hidden,
        }
    }

    /// One step; returns `(h, c, cache)`.
    pub fn step(&self, store: &ParamStore, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmStepCache) {
        let n = self.hidden;
        let mut pre = self.input.forward(store, x);
        axpy(1.0, &self.recurrent.forward(store, h_prev), &mut pre);
        let i: Vec<f64> = pre[..n].iter().map(|&z| sigmoid(z)).collect();
        let f: Vec<f64> = pre[n..2 * n].iter().map(|&z| sigmoid(z)).collect();
        let g: Vec<f64> = pre[2 * n..3 * n].iter().map(|&z| z.tanh()).collect();
        let o: Vec<f64> = pre[3 * n..].iter().map(|&z| sigmoid(z)).collect();
        let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        (h, c, cache)
    }

    /// Backward through one step given `∂/∂h` and `∂/∂c` of its outputs.
    /// Returns `(∂/∂x, ∂/∂h_prev, ∂/∂c_prev)`.
    pub fn step_backward(
        &self,
        store: &ParamStore,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden;
        let mut dpre = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dpre[k] = dct * g * i * (1.0 - i);
            dpre[n + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dpre[2 * n + k] = dct * i * (1.0 - g * g);
            dpre[3 * n + k] = d_o * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        let dx = self.input.backward(store, &cache.x, &dpre, grads, InputGrad::All);
        let dh_prev = self.recurrent.backward(store, &cache.h_prev, &dpre, grads, InputGrad::All);
        (dx, dh_prev, dc_prev)
    }

    /// Runs a sequence from a zero state and returns the final hidden state.
    pub fn run(&self, store: &ParamStore, tokens: &[Vec<f64>]) -> (Vec<f64>, Vec<LstmStepCache>) {
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        let mut caches = Vec::with_capacity(tokens.len());
        for x in tokens {
            let (h2, c2, cache) = self.step(store, x, &h, &c);
            h = h2;
            c = c2;
            caches.push(cache);
        }
        (h, caches)
    }

    /// Backpropagation through time for [`LstmCell::run`]; returns the
    /// gradient of each token.
    pub fn run_backward(&self, store: &ParamStore, caches: &[LstmStepCache], dh_last: &[f64], grads: &mut Grads) -> Vec<Vec<f64>> {
        let mut dh = dh_last.to_vec();
        let mut dc = vec![0.0; self.hidden];
        let mut dxs = vec![Vec::new(); caches.len()];
        for (t, cache) in caches.iter().enumerate().rev() {
            let (dx, dh_prev, dc_prev) = self.step_backward(store, cache, &dh, &dc, grads);
            dxs[t] = dx;
            dh = dh_prev;
            dc = dc_prev;
        }
        dxs
    }
}

/// Privileged-information fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFusion {
    pub proj_c: Dense,
    pub proj_s: Dense,
    pub lstm: LstmCell,
    pub placeholder: ParamId,
    pub elements: EmbeddingTable,
    pub content_dim: usize,
    pub model_dim: usize,
    pub lstm_input: usize,
}

/// The privileged second token, or its absence at inference time.
#[derive(Debug, Clone, Copy)]
pub enum Privileged<'a> {
    Present(&'a [f64]),
    Absent,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    c: Vec<f64>,
    s_hat: Option<Vec<f64>>,
    steps: Vec<LstmStepCache>,
}

impl SemanticFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        content_dim: usize,
        model_dim: usize,
        lstm_input: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        let elements = EmbeddingTable::new(store, &format!("{name}.elements"), vocab.max(1), model_dim, rng);
        let proj_c = Dense::new(store, &format!("{name}.proj_c"), content_dim, lstm_input, true, rng);
        let proj_s = Dense::new(store, &format!("{name}.proj_s"), model_dim, lstm_input, true, rng);
        let lstm = LstmCell::new(store, &format!("{name}.lstm"), lstm_input, model_dim, rng);
        let placeholder = store.add(
            format!("{name}.placeholder"),
            ParamKind::Dense,
            Tensor::normal(1, lstm_input, 0.01, rng),
        );
        Self {
            proj_c,
            proj_s,
            lstm,
            placeholder,
            elements,
            content_dim,
            model_dim,
            lstm_input,
        }
    }

    pub fn encode_annotation(&self, store: &ParamStore, elements: &[usize]) -> Result<Vec<f64>> {
        encode_privileged(elements, &self.elements, store)
    }

    /// `s_i = LSTM([proj_c(c_i), proj_s(ŝ_i) | placeholder])`.
    pub fn forward(&self, store: &ParamStore, c: &[f64], s_hat: Privileged<'_>) -> Result<(Vec<f64>, FusionCache)> {
        check_len("semantic fusion c_i", c.len(), self.content_dim)?;
        let first = self.proj_c.forward(store, c);
        let (second, s_hat) = match s_hat {
            Privileged::Present(s) => {
                check_len("semantic fusion ŝ_i", s.len(), self.model_dim)?;
                (self.proj_s.forward(store, s), Some(s.to_vec()))
            }
            Privileged::Absent => (store.get(self.placeholder).data.clone(), None),
        };
        let (h, steps) = self.lstm.run(store, &[first, second]);
        Ok((h, FusionCache { c: c.to_vec(), s_hat, steps }))
    }

    /// Returns `(∂/∂c_i, ∂/∂ŝ_i)`; the latter is empty on the absent path.
    pub fn backward(&self, store: &ParamStore, cache: &FusionCache, grad_out: &[f64], grads: &mut Grads) -> (Vec<f64>, Vec<f64>) {
        let dtok = self.lstm.run_backward(store, &cache.steps, grad_out, grads);
        let dc = self.proj_c.backward(store, &cache.c, &dtok[0], grads, InputGrad::All);
        let ds = match &cache.s_hat {
            Some(s) => self.proj_s.backward(store, s, &dtok[1], grads, InputGrad::All),
            None => {
                axpy(1.0, &dtok[1], grads.dense_mut(self.placeholder));
                Vec::new()
            }
        };
        (dc, ds)
    }

    pub fn annotation_backward(&self, elements: &[usize], grads: &mut Grads, grad: &[f64]) {
        encode_privileged_backward(elements, &self.elements, grads, grad);
    }
}

/// Semantic branch `c_i (, ŝ_i) → s_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticBranch {
    /// No privileged fusion: `s_i = W c_i + b`, adapting the width only.
    Passthrough(Dense),
    Privileged(SemanticFusion),
}

/// Free-function form of the fusion forward pass.
pub fn fuse_semantic(store: &ParamStore, params: &SemanticFusion, c: &[f64], s_hat: Privileged<'_>) -> Result<Vec<f64>> {
    Ok(params.forward(store, c, s_hat)?.0)
}
