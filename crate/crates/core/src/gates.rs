//! Gated normalisation and the two gates built on it.
//!
//! `⊙` is the elementwise (Hadamard) product: the gated term is divided by
//! its vector norm and passed on as a vector, so it must be vector-valued.
//!
//! * visual-aware gate: `v = LeakyReLU(W_m · N(e, δ_v(p ‖ e ‖ g_v)) + b_m)`
//! * inference gate:    `c = N(e, δ_s(e ‖ g_s))`
//!
//! where `N(x, a) = (x ⊙ a) / max(‖x ⊙ a‖₂, ε)` and `δ` is a plain dense
//! layer whose output width equals the uniform embedding width.
//!
//! With task-aware gating disabled both gates collapse to plain projections
//! of `e` (no gate vector, no user conditioning, no normalisation).

use rand::Rng;

use crate::error::{check_finite, check_len, Result};
use crate::layers::{Dense, InputGrad, LeakyDense};
use crate::linalg::{axpy, concat, dot};
use crate::params::{Grads, ParamId, ParamKind, ParamStore, Tensor};

/// Denominator floor of the gated normalisation. Fixed.
pub const EPSILON: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct NormCache {
    h: Vec<f64>,
    denom: f64,
    clamped: bool,
}

fn normalize_unchecked(x: &[f64], gate: &[f64]) -> (Vec<f64>, NormCache) {
    let h: Vec<f64> = x.iter().zip(gate).map(|(a, b)| a * b).collect();
    let norm = dot(&h, &h).sqrt();
    let (denom, clamped) = if norm >= EPSILON { (norm, false) } else { (EPSILON, true) };
    let out = h.iter().map(|v| v / denom).collect();
    (out, NormCache { h, denom, clamped })
}

/// `(x ⊙ gate) / max(‖x ⊙ gate‖₂, ε)`.
pub fn gated_normalize(x: &[f64], gate: &[f64]) -> Result<(Vec<f64>, NormCache)> {
    check_len("gate logits", gate.len(), x.len())?;
    check_finite("gated_normalize input", x)?;
    check_finite("gated_normalize gate", gate)?;
    Ok(normalize_unchecked(x, gate))
}

/// Returns `(∂/∂x, ∂/∂gate)`.
pub fn gated_normalize_backward(x: &[f64], gate: &[f64], cache: &NormCache, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inv = 1.0 / cache.denom;
    let dh: Vec<f64> = if cache.clamped {
        grad_out.iter().map(|g| g * inv).collect()
    } else {
        // y = h/|h|  ⇒  dh = (g − y (y·g)) / |h|
        let proj = dot(&cache.h, grad_out) * inv * inv;
        grad_out
            .iter()
            .zip(&cache.h)
            .map(|(g, h)| (g - h * proj) * inv)
            .collect()
    };
    let dx = dh.iter().zip(gate).map(|(d, a)| d * a).collect();
    let dgate = dh.iter().zip(x).map(|(d, a)| d * a).collect();
    (dx, dgate)
}

/// Backward of a gate's logit layer `W (x ‖ g) + b`, where the gate vector
/// `g` occupies the trailing columns of `z`. Returns `∂/∂z` on the first
/// `input_cols` columns (zeros elsewhere).
fn gate_layer_backward(
    delta: &Dense,
    gate: ParamId,
    store: &ParamStore,
    z: &[f64],
    dlogits: &[f64],
    grads: &mut Grads,
    input_cols: usize,
) -> Vec<f64> {
    let head = delta.in_dim - store.get(gate).cols;
    if let Some(b) = delta.bias {
        axpy(1.0, dlogits, grads.dense_mut(b));
    }
    grads.add_outer_at(delta.weight, dlogits, &z[..head], 0);
    grads.add_outer_shared(delta.weight, dlogits, &z[head..], head);
    grads.add_transposed(store, gate, delta.weight, head..delta.in_dim, dlogits);
    let w = store.get(delta.weight);
    let mut dz = vec![0.0; delta.in_dim];
    if input_cols > 0 {
        for (o, &g) in dlogits.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w.row(o)[..input_cols], &mut dz[..input_cols]);
            }
        }
    }
    dz
}

/// Parameters of the user-conditioned visual-aware gate.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualGate {
    pub delta: Dense,
    pub gate: ParamId,
    pub mlp: LeakyDense,
    pub model_dim: usize,
    pub content_dim: usize,
}

#[derive(Debug, Clone)]
pub struct VisualGateCache {
    z: Vec<f64>,
    logits: Vec<f64>,
    norm: NormCache,
    core: Vec<f64>,
    mlp_pre: Vec<f64>,
}

impl VisualGate {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, model_dim: usize, content_dim: usize, rng: &mut R) -> Self {
        let delta = Dense::new(store, &format!("{name}.delta"), model_dim + 2 * content_dim, content_dim, true, rng);
        let gate = store.add(
            format!("{name}.gate"),
            ParamKind::Dense,
            Tensor::normal(1, content_dim, 1.0, rng),
        );
        let mlp = LeakyDense::new(store, &format!("{name}.mlp"), content_dim, model_dim, rng);
        Self { delta, gate, mlp, model_dim, content_dim }
    }

    pub fn forward(&self, store: &ParamStore, e: &[f64], p: &[f64]) -> Result<(Vec<f64>, VisualGateCache)> {
        check_len("visual gate e_i", e.len(), self.content_dim)?;
        check_len("visual gate p_u", p.len(), self.model_dim)?;
        let z = concat(&[p, e, &store.get(self.gate).data]);
        let logits = self.delta.forward(store, &z);
        let (core, norm) = normalize_unchecked(e, &logits);
        let (mlp_pre, v) = self.mlp.forward(store, &core);
        Ok((v, VisualGateCache { z, logits, norm, core, mlp_pre }))
    }

    /// Returns `(∂/∂e, ∂/∂p)`; `∂/∂e` is empty unless `need_e`.
    pub fn backward(
        &self,
        store: &ParamStore,
        e: &[f64],
        cache: &VisualGateCache,
        grad_out: &[f64],
        grads: &mut Grads,
        need_e: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let (d, c) = (self.model_dim, self.content_dim);
        let dcore = self.mlp.backward(store, &cache.core, &cache.mlp_pre, grad_out, grads, InputGrad::All);
        let (dx, dlogits) = gated_normalize_backward(e, &cache.logits, &cache.norm, &dcore);
        let dz = gate_layer_backward(&self.delta, self.gate, store, &cache.z, &dlogits, grads, if need_e { d + c } else { d });
        let dp = dz[..d].to_vec();
        let de = if need_e {
            dx.iter().zip(&dz[d..d + c]).map(|(a, b)| a + b).collect()
        } else {
            Vec::new()
        };
        (de, dp)
    }

    /// [`VisualGate::forward`] given `item_logits` from [`VisualGate::item_logits_many`].
    pub fn forward_with_item_logits(&self, store: &ParamStore, e: &[f64], p: &[f64], item_logits: &[f64]) -> Result<(Vec<f64>, VisualGateCache)> {
        check_len("visual gate e_i", e.len(), self.content_dim)?;
        check_len("visual gate p_u", p.len(), self.model_dim)?;
        check_len("visual gate logits", item_logits.len(), self.content_dim)?;
        let z = concat(&[p, e, &store.get(self.gate).data]);
        let user = self.user_logits(store, p);
        let logits: Vec<f64> = item_logits.iter().zip(&user).map(|(a, b)| a + b).collect();
        let (core, norm) = normalize_unchecked(e, &logits);
        let (mlp_pre, v) = self.mlp.forward(store, &core);
        Ok((v, VisualGateCache { z, logits, norm, core, mlp_pre }))
    }

    /// [`VisualGate::item_logits`] for several items in one sweep.
    pub fn item_logits_many(&self, store: &ParamStore, es: &[&[f64]]) -> Vec<Vec<f64>> {
        let (d, c) = (self.model_dim, self.content_dim);
        let g = &store.get(self.gate).data;
        let constant = self.delta.forward_many(store, &[&concat(&[&vec![0.0; d + c], g])]).remove(0);
        let mut out = self.delta.partial_many(store, d..d + c, es);
        for y in &mut out {
            axpy(1.0, &constant, y);
        }
        out
    }

    /// Item-dependent part of the gate logits: `b + W_e e + W_g g_v`.
    pub fn item_logits(&self, store: &ParamStore, e: &[f64]) -> Vec<f64> {
        let (d, c) = (self.model_dim, self.content_dim);
        let w = store.get(self.delta.weight);
        let g = &store.get(self.gate).data;
        let mut out = match self.delta.bias {
            Some(b) => store.get(b).data.clone(),
            None => vec![0.0; c],
        };
        for (o, v) in out.iter_mut().enumerate() {
            let row = w.row(o);
            *v += dot(&row[d..d + c], e) + dot(&row[d + c..], g);
        }
        out
    }

    /// User-dependent part of the gate logits: `W_p p`.
    pub fn user_logits(&self, store: &ParamStore, p: &[f64]) -> Vec<f64> {
        let w = store.get(self.delta.weight);
        (0..self.content_dim)
            .map(|o| dot(&w.row(o)[..self.model_dim], p))
            .collect()
    }

    /// Completes the forward pass from precomputed logit halves.
    pub fn finish(&self, store: &ParamStore, e: &[f64], item_logits: &[f64], user_logits: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = item_logits.iter().zip(user_logits).map(|(a, b)| a + b).collect();
        let (core, _) = normalize_unchecked(e, &logits);
        self.mlp.forward(store, &core).1
    }
}

/// Parameters of the self-gated inference gate.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceGate {
    pub delta: Dense,
    pub gate: ParamId,
    pub content_dim: usize,
}

#[derive(Debug, Clone)]
pub struct InferenceGateCache {
    z: Vec<f64>,
    logits: Vec<f64>,
    norm: NormCache,
}

impl InferenceGate {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, content_dim: usize, rng: &mut R) -> Self {
        let delta = Dense::new(store, &format!("{name}.delta"), 2 * content_dim, content_dim, true, rng);
        let gate = store.add(
            format!("{name}.gate"),
            ParamKind::Dense,
            Tensor::normal(1, content_dim, 1.0, rng),
        );
        Self { delta, gate, content_dim }
    }

    /// `c_i`, still of the uniform width.
    pub fn forward(&self, store: &ParamStore, e: &[f64]) -> Result<(Vec<f64>, InferenceGateCache)> {
        check_len("inference gate e_i", e.len(), self.content_dim)?;
        let z = concat(&[e, &store.get(self.gate).data]);
        let logits = self.delta.forward(store, &z);
        let (c, norm) = normalize_unchecked(e, &logits);
        Ok((c, InferenceGateCache { z, logits, norm }))
    }

    /// Logits for several items in one sweep of the weight matrix.
    pub fn logits_many(&self, store: &ParamStore, es: &[&[f64]]) -> Vec<Vec<f64>> {
        let c = self.content_dim;
        let g = &store.get(self.gate).data;
        let constant = self.delta.forward_many(store, &[&concat(&[&vec![0.0; c], g])]).remove(0);
        let mut out = self.delta.partial_many(store, 0..c, es);
        for y in &mut out {
            axpy(1.0, &constant, y);
        }
        out
    }

    /// [`InferenceGate::forward`] given logits from [`InferenceGate::logits_many`].
    pub fn forward_with_logits(&self, store: &ParamStore, e: &[f64], logits: Vec<f64>) -> Result<(Vec<f64>, InferenceGateCache)> {
        check_len("inference gate e_i", e.len(), self.content_dim)?;
        check_len("inference gate logits", logits.len(), self.content_dim)?;
        let z = concat(&[e, &store.get(self.gate).data]);
        let (c, norm) = normalize_unchecked(e, &logits);
        Ok((c, InferenceGateCache { z, logits, norm }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        e: &[f64],
        cache: &InferenceGateCache,
        grad_out: &[f64],
        grads: &mut Grads,
        need_e: bool,
    ) -> Vec<f64> {
        let c = self.content_dim;
        let (dx, dlogits) = gated_normalize_backward(e, &cache.logits, &cache.norm, grad_out);
        let dz = gate_layer_backward(&self.delta, self.gate, store, &cache.z, &dlogits, grads, if need_e { c } else { 0 });
        if need_e {
            dx.iter().zip(&dz[..c]).map(|(a, b)| a + b).collect()
        } else {
            Vec::new()
        }
    }
}

/// Visual branch `e_i (, p_u) → v_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualBranch {
    Gated(VisualGate),
    /// `LeakyReLU(W e + b)`.
    Plain(LeakyDense),
}

#[derive(Debug, Clone)]
pub enum VisualCache {
    Gated(VisualGateCache),
    Plain { pre: Vec<f64> },
}

impl VisualBranch {
    pub fn forward(&self, store: &ParamStore, e: &[f64], p: &[f64]) -> Result<(Vec<f64>, VisualCache)> {
        match self {
            VisualBranch::Gated(g) => {
                let (v, c) = g.forward(store, e, p)?;
                Ok((v, VisualCache::Gated(c)))
            }
            VisualBranch::Plain(l) => {
                check_len("visual projection e_i", e.len(), l.dense.in_dim)?;
                let (pre, v) = l.forward(store, e);
                Ok((v, VisualCache::Plain { pre }))
            }
        }
    }

    /// Returns `(∂/∂e, ∂/∂p)`; either may be empty when not needed / not used.
    pub fn backward(
        &self,
        store: &ParamStore,
        e: &[f64],
        cache: &VisualCache,
        grad_out: &[f64],
        grads: &mut Grads,
        need_e: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        match (self, cache) {
            (VisualBranch::Gated(g), VisualCache::Gated(c)) => g.backward(store, e, c, grad_out, grads, need_e),
            (VisualBranch::Plain(l), VisualCache::Plain { pre }) => {
                let mode = if need_e { InputGrad::All } else { InputGrad::None };
                (l.backward(store, e, pre, grad_out, grads, mode), Vec::new())
            }
            _ => unreachable!("visual cache does not match branch"),
        }
    }

    pub fn user_conditioned(&self) -> bool {
        matches!(self, VisualBranch::Gated(_))
    }
}

/// Inference branch `e_i → c_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceBranch {
    Gated(InferenceGate),
    /// `W e + b`, keeping the uniform width.
    Plain(Dense),
}

#[derive(Debug, Clone)]
pub enum InferenceCache {
    Gated(InferenceGateCache),
    Plain,
}

impl InferenceBranch {
    pub fn forward(&self, store: &ParamStore, e: &[f64]) -> Result<(Vec<f64>, InferenceCache)> {
        match self {
            InferenceBranch::Gated(g) => {
                let (c, cache) = g.forward(store, e)?;
                Ok((c, InferenceCache::Gated(cache)))
            }
            InferenceBranch::Plain(d) => {
                check_len("inference projection e_i", e.len(), d.in_dim)?;
                Ok((d.forward(store, e), InferenceCache::Plain))
            }
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        e: &[f64],
        cache: &InferenceCache,
        grad_out: &[f64],
        grads: &mut Grads,
        need_e: bool,
    ) -> Vec<f64> {
        match (self, cache) {
            (InferenceBranch::Gated(g), InferenceCache::Gated(c)) => g.backward(store, e, c, grad_out, grads, need_e),
            (InferenceBranch::Plain(d), InferenceCache::Plain) => {
                let mode = if need_e { InputGrad::All } else { InputGrad::None };
                d.backward(store, e, grad_out, grads, mode)
            }
            _ => unreachable!("inference cache does not match branch"),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            InferenceBranch::Gated(g) => g.content_dim,
            InferenceBranch::Plain(d) => d.out_dim,
        }
    }
}

/// Convenience wrapper for the visual-aware gate as a free function.
pub fn visual_gate(store: &ParamStore, params: &VisualGate, e: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward(store, e, p)?.0)
}

/// Convenience wrapper for the inference gate as a free function.
pub fn inference_gate(store: &ParamStore, params: &InferenceGate, e: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward(store, e)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::layers::leaky_relu;
    use crate::rng;

    #[test]
    fn zero_input_maps_to_zero() {
        let (y, _) = gated_normalize(&[0.0; 4], &[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn basis_vector_is_fixed_point() {
        let (y, _) = gated_normalize(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn three_four_five() {
        let (y, _) = gated_normalize(&[3.0, 4.0, 0.0, 0.0], &[1.0; 4]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        assert_eq!(&y[2..], &[0.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        assert!(matches!(gated_normalize(&[f64::NAN], &[1.0]), Err(Error::Numeric(_))));
        assert!(matches!(gated_normalize(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    }

    fn toy_store() -> (ParamStore, VisualGate, InferenceGate) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "toy");
        let vg = VisualGate::new(&mut store, "v", 2, 4, &mut r);
        let ig = InferenceGate::new(&mut store, "s", 4, &mut r);
        (store, vg, ig)
    }

    #[test]
    fn zero_delta_gives_leaky_bias() {
        let (mut store, vg, _) = toy_store();
        store.get_mut(vg.delta.weight).data.fill(0.0);
        store.get_mut(vg.mlp.dense.bias.unwrap()).data.copy_from_slice(&[0.3, -0.5]);
        let v = visual_gate(&store, &vg, &[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5]).unwrap();
        assert_eq!(v, vec![0.3, leaky_relu(-0.5)]);
    }

    #[test]
    fn visual_gate_hand_computed() {
        // d = 2, c = 4. δ_v picks (p0 + e0, 1, g2, 0) via its weight; mlp is
        // the identity on the first two coordinates.
        let (mut store, vg, _) = toy_store();
        let mut w = vec![0.0; 4 * 10];
        w[0] = 1.0; // row 0: p0
        w[2] = 1.0; //        + e0
        store.get_mut(vg.delta.weight).data.copy_from_slice(&w);
        store.get_mut(vg.delta.bias.unwrap()).data.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        store.get_mut(vg.delta.weight).data[2 * 10 + 8] = 1.0; // row 2: g2
        store.get_mut(vg.gate).data.copy_from_slice(&[0.0, 0.0, 2.0, 0.0]);
        let mut m = vec![0.0; 2 * 4];
        m[0] = 1.0;
        m[4 + 1] = 1.0;
        store.get_mut(vg.mlp.dense.weight).data.copy_from_slice(&m);
        store.get_mut(vg.mlp.dense.bias.unwrap()).data.fill(0.0);
        let e = [1.0, 2.0, 3.0, 4.0];
        let p = [2.0, 7.0];
        // logits = (3, 1, 2, 0); h = e ⊙ logits = (3, 2, 6, 0); |h| = 7
        let v = visual_gate(&store, &vg, &e, &p).unwrap();
        assert!((v[0] - 3.0 / 7.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 7.0).abs() < 1e-15);
        let split = vg.finish(&store, &e, &vg.item_logits(&store, &e), &vg.user_logits(&store, &p));
        assert!((split[0] - v[0]).abs() < 1e-15 && (split[1] - v[1]).abs() < 1e-15);
    }

    #[test]
    fn inference_gate_hand_computed_and_unit_norm() {
        let (mut store, _, ig) = toy_store();
        // δ_s = identity on e, zero on g_s, bias 1: logits = e + 1
        let mut w = vec![0.0; 4 * 8];
        for k in 0..4 {
            w[k * 8 + k] = 1.0;
        }
        store.get_mut(ig.delta.weight).data.copy_from_slice(&w);
        store.get_mut(ig.delta.bias.unwrap()).data.fill(1.0);
        let e = [1.0, -1.0, 0.0, 2.0];
        // h = e ⊙ (e + 1) = (2, 0, 0, 6); |h| = √40
        let c = inference_gate(&store, &ig, &e).unwrap();
        let n = 40f64.sqrt();
        assert!((c[0] - 2.0 / n).abs() < 1e-15 && (c[3] - 6.0 / n).abs() < 1e-15);
        assert!((dot(&c, &c).sqrt() - 1.0).abs() < 1e-9);
        assert_eq!(inference_gate(&store, &ig, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(inference_gate(&store, &ig, &[0.0; 3]), Err(Error::Shape(_))));
    }
}
