//! Multimodal fusion, preference scores and the ranking objectives.
//!
//! * fusion: `f_i = LeakyReLU(W (q_i ‖ v_i ‖ s_i) + b)`
//! * MF:     `ŷ = α + β_u + β_i + p_uᵀ f_i`
//! * VBPR:   `ŷ = α + β_u + β_i + b_cᵀ c_i + p_uᵀ f_i + a_uᵀ c_i`
//!
//! The content bias is a learned projection `b_cᵀ c_i`, following the
//! visual-bias construction of VBPR.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::layers::{neg_log_sigmoid, sigmoid, Dense, InputGrad, LeakyDense};
use crate::linalg::dot;
use crate::params::{Grads, ParamId, ParamKind, ParamStore, Tensor};
use crate::representations::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mf,
    Vbpr,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(Backbone::Mf),
            "vbpr" => Ok(Backbone::Vbpr),
            other => Err(format!("unknown backbone {other:?} (expected mf or vbpr)")),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Mf => "mf",
            Backbone::Vbpr => "vbpr",
        })
    }
}

/// Fusion layer over the concatenated item representations.
pub type FusionMlp = LeakyDense;

/// `f_i` from its parts; `parts` are concatenated in order.
pub fn fuse_multimodal(store: &ParamStore, fusion: &FusionMlp, parts: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let x = crate::linalg::concat(parts);
    check_len("fusion input", x.len(), fusion.dense.in_dim)?;
    let (pre, out) = fusion.forward(store, &x);
    Ok((x, pre, out))
}

/// VBPR-only parameters: per-user content preference `a_u` and content bias.
#[derive(Debug, Clone, PartialEq)]
pub struct VbprTerms {
    pub user_content: EmbeddingTable,
    pub content_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBiases {
    pub global: ParamId,
    pub user: EmbeddingTable,
    pub item: EmbeddingTable,
    pub vbpr: Option<VbprTerms>,
}

impl ScoreBiases {
    pub fn new<R: Rng>(store: &mut ParamStore, n_users: usize, n_items: usize, vbpr_dim: Option<usize>, rng: &mut R) -> Self {
        let global = store.add("scoring.alpha", ParamKind::Dense, Tensor::zeros(1, 1));
        let user = EmbeddingTable::zeros(store, "scoring.beta_user", n_users, 1);
        let item = EmbeddingTable::zeros(store, "scoring.beta_item", n_items, 1);
        let vbpr = vbpr_dim.map(|c| VbprTerms {
            user_content: EmbeddingTable::new(store, "scoring.user_content", n_users, c, rng),
            content_bias: store.add("scoring.content_bias", ParamKind::Dense, Tensor::zeros(1, c)),
        });
        Self { global, user, item, vbpr }
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        store.get(self.global).data[0]
    }

    pub fn beta_user(&self, store: &ParamStore, u: usize) -> Result<f64> {
        Ok(self.user.lookup(store, u)?[0])
    }

    pub fn beta_item(&self, store: &ParamStore, i: usize) -> Result<f64> {
        Ok(self.item.lookup(store, i)?[0])
    }
}

/// `α + β_u + β_i + p_uᵀ f_i`.
pub fn score_mf(p: &[f64], f: &[f64], alpha: f64, beta_u: f64, beta_i: f64) -> Result<f64> {
    check_len("score_mf f_i", f.len(), p.len())?;
    Ok(alpha + beta_u + beta_i + dot(p, f))
}

/// `α + β_u + β_i + b_cᵀ c + p_uᵀ f_i + a_uᵀ c`.
#[allow(clippy::too_many_arguments)]
pub fn score_vbpr(p: &[f64], f: &[f64], a_u: &[f64], c: &[f64], b_c: &[f64], alpha: f64, beta_u: f64, beta_i: f64) -> Result<f64> {
    check_len("score_vbpr f_i", f.len(), p.len())?;
    check_len("score_vbpr c_i", c.len(), a_u.len())?;
    check_len("score_vbpr b_c", b_c.len(), a_u.len())?;
    Ok(alpha + beta_u + beta_i + dot(b_c, c) + dot(p, f) + dot(a_u, c))
}

/// Gradients of a score with respect to its vector inputs, each scaled by
/// the upstream `∂L/∂ŷ`. The bias gradient applies to `α`, `β_u` and `β_i`
/// alike. VBPR-only fields are empty for MF.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub p: Vec<f64>,
    pub f: Vec<f64>,
    pub a_u: Vec<f64>,
    pub c: Vec<f64>,
    pub b_c: Vec<f64>,
    pub bias: f64,
}

pub fn score_mf_backward(p: &[f64], f: &[f64], dscore: f64) -> ScoreGrads {
    ScoreGrads {
        p: f.iter().map(|v| dscore * v).collect(),
        f: p.iter().map(|v| dscore * v).collect(),
        a_u: Vec::new(),
        c: Vec::new(),
        b_c: Vec::new(),
        bias: dscore,
    }
}

pub fn score_vbpr_backward(p: &[f64], f: &[f64], a_u: &[f64], c: &[f64], b_c: &[f64], dscore: f64) -> ScoreGrads {
    let mut g = score_mf_backward(p, f, dscore);
    g.a_u = c.iter().map(|v| dscore * v).collect();
    g.b_c = g.a_u.clone();
    g.c = a_u.iter().zip(b_c).map(|(a, b)| dscore * (a + b)).collect();
    g
}

/// `-ln σ(ŷ_pos − ŷ_neg)`.
pub fn bpr_loss(pos: f64, neg: f64) -> f64 {
    neg_log_sigmoid(pos - neg)
}

/// `∂ bpr_loss / ∂ŷ_pos` (the negative score gets the opposite sign).
pub fn bpr_loss_grad(pos: f64, neg: f64) -> f64 {
    -sigmoid(neg - pos)
}

/// Auxiliary per-branch heads scoring `p_uᵀ W x` for the branch rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeads {
    pub visual: Dense,
    pub semantic: Dense,
}

impl AuxHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            visual: Dense::new(store, "aux.visual", dim, dim, false, rng),
            semantic: Dense::new(store, "aux.semantic", dim, dim, false, rng),
        }
    }
}

/// BPR loss of one auxiliary head and its gradients.
#[derive(Debug, Clone)]
pub struct BranchLoss {
    pub loss: f64,
    head_pos: Vec<f64>,
    head_neg: Vec<f64>,
    dmargin: f64,
}

pub fn branch_loss(store: &ParamStore, head: &Dense, p: &[f64], x_pos: &[f64], x_neg: &[f64]) -> Result<BranchLoss> {
    check_len("branch head input", x_pos.len(), head.in_dim)?;
    check_len("branch head input", x_neg.len(), head.in_dim)?;
    check_len("branch head user", p.len(), head.out_dim)?;
    let head_pos = head.forward(store, x_pos);
    let head_neg = head.forward(store, x_neg);
    let (sp, sn) = (dot(p, &head_pos), dot(p, &head_neg));
    Ok(BranchLoss {
        loss: bpr_loss(sp, sn),
        dmargin: bpr_loss_grad(sp, sn),
        head_pos,
        head_neg,
    })
}

/// Backward of `weight · loss`; accumulates head weights and returns
/// `(∂/∂p, ∂/∂x_pos, ∂/∂x_neg)`.
pub fn branch_loss_backward(
    store: &ParamStore,
    head: &Dense,
    p: &[f64],
    x_pos: &[f64],
    x_neg: &[f64],
    bl: &BranchLoss,
    weight: f64,
    grads: &mut Grads,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = weight * bl.dmargin;
    let dp: Vec<f64> = bl.head_pos.iter().zip(&bl.head_neg).map(|(a, b)| g * (a - b)).collect();
    let dh_pos: Vec<f64> = p.iter().map(|v| g * v).collect();
    let dh_neg: Vec<f64> = p.iter().map(|v| -g * v).collect();
    let dx_pos = head.backward(store, x_pos, &dh_pos, grads, InputGrad::All);
    let dx_neg = head.backward(store, x_neg, &dh_neg, grads, InputGrad::All);
    (dp, dx_pos, dx_neg)
}

/// `(L_v, L_s)` for one triple.
#[allow(clippy::too_many_arguments)]
pub fn branch_losses(
    store: &ParamStore,
    heads: &AuxHeads,
    p: &[f64],
    v_pos: &[f64],
    v_neg: &[f64],
    s_pos: &[f64],
    s_neg: &[f64],
) -> Result<(f64, f64)> {
    let lv = branch_loss(store, &heads.visual, p, v_pos, v_neg)?.loss;
    let ls = branch_loss(store, &heads.semantic, p, s_pos, s_neg)?.loss;
    Ok((lv, ls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mf_anchors() {
        assert_eq!(score_mf(&[1.0, 0.0], &[1.0, 0.0], 0.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(score_mf(&[1.0, 1.0], &[1.0, 1.0], 0.5, 0.25, -0.25).unwrap(), 2.5);
        assert_eq!(score_mf(&[1.0, 0.0], &[0.0, 3.0], 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(score_mf(&[1.0], &[1.0, 2.0], 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn vbpr_degenerates_and_is_linear_in_a_u() {
        let p = [0.3, -0.2];
        let f = [1.5, 0.5];
        let c = [0.1, 0.2, 0.3];
        let mf = score_mf(&p, &f, 0.1, 0.2, 0.3).unwrap();
        assert_eq!(score_vbpr(&p, &f, &[0.0; 3], &c, &[0.0; 3], 0.1, 0.2, 0.3).unwrap(), mf);
        // hand: 0 + 0 + 0 + (1·0.1) + 0.45−0.1 + (2·0.1 + 1·0.2 + 0·0.3) = 0.85
        let y = score_vbpr(&p, &f, &[2.0, 1.0, 0.0], &c, &[1.0, 0.0, 0.0], 0.0, 0.0, 0.0).unwrap();
        assert!((y - 0.85).abs() < 1e-15);
        let base = score_vbpr(&p, &f, &[0.0; 3], &c, &[0.0; 3], 0.0, 0.0, 0.0).unwrap();
        let one = score_vbpr(&p, &f, &[2.0, 1.0, 0.0], &c, &[0.0; 3], 0.0, 0.0, 0.0).unwrap() - base;
        let two = score_vbpr(&p, &f, &[4.0, 2.0, 0.0], &c, &[0.0; 3], 0.0, 0.0, 0.0).unwrap() - base;
        assert!((two - 2.0 * one).abs() < 1e-15);
    }

    #[test]
    fn bpr_anchors() {
        assert!((bpr_loss(0.7, 0.7) - std::f64::consts::LN_2).abs() < 1e-12);
        let expected = (1.0 + (-10f64).exp()).ln();
        assert!((bpr_loss(10.0, 0.0) - expected).abs() < 1e-15);
        assert!((bpr_loss(10.0, 0.0) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn fusion_zero_and_identity_blocks() {
        let mut store = ParamStore::new();
        let fusion = FusionMlp::new(&mut store, "fusion", 6, 2, &mut rng::stream(0, "f"));
        store.get_mut(fusion.dense.weight).data.fill(0.0);
        let (_, _, f) = fuse_multimodal(&store, &fusion, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        // identity blocks: f = LeakyReLU(q + v + s)
        let mut w = vec![0.0; 12];
        for blk in 0..3 {
            w[blk * 2] = 1.0;
            w[6 + blk * 2 + 1] = 1.0;
        }
        store.get_mut(fusion.dense.weight).data.copy_from_slice(&w);
        let (_, _, f) = fuse_multimodal(&store, &fusion, &[&[1.0, -2.0], &[0.5, -1.0], &[0.25, 0.0]]).unwrap();
        assert_eq!(f, vec![1.75, -0.03]);
        assert!(fuse_multimodal(&store, &fusion, &[&[1.0]]).is_err());
    }

    #[test]
    fn branch_loss_hand_computed() {
        let mut store = ParamStore::new();
        let heads = AuxHeads::new(&mut store, 2, &mut rng::stream(0, "a"));
        store.get_mut(heads.visual.weight).data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.get_mut(heads.semantic.weight).data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let p = [1.0, 2.0];
        let (lv, ls) = branch_losses(&store, &heads, &p, &[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((lv - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ls - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    }
}
