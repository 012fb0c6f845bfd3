//! The assembled recommender: backbone embeddings, the two content branches,
//! multimodal fusion and the scoring head, with the per-triple composite loss
//! and its gradient.
//!
//! Which pieces exist is decided by [`Components`]; a disabled component has
//! no parameters at all, so parameter counts grow along the ablation ladder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ContentTable, TrainingTriple};
use crate::error::{Error, Result};
use crate::gates::{InferenceBranch, InferenceCache, InferenceGate, VisualBranch, VisualCache, VisualGate};
use crate::grad_reg::{scale_gradient, scale_gradient_backward, QNET_SCALARS};
use crate::layers::{Dense, InputGrad, LeakyDense};
use crate::linalg::{axpy, dot};
use crate::par::{map_indexed, map_slice, Exec};
use crate::params::{Grads, ParamStore};
use crate::representations::{encode_uniform, ConvEncoder, EmbeddingTable, EncoderCache, EncoderMode};
use crate::rng;
use crate::scoring::{
    bpr_loss, bpr_loss_grad, branch_loss, branch_loss_backward, fuse_multimodal, score_mf_backward, score_vbpr_backward, AuxHeads,
    Backbone, FusionMlp, ScoreBiases,
};
use crate::semantic_fusion::{FusionCache, Privileged, SemanticBranch, SemanticFusion};

/// Triples per gradient chunk. Chunks are reduced in order, so the batch
/// gradient does not depend on how chunks are scheduled across threads.
pub const GRAD_CHUNK: usize = 16;

/// Optional model components, named as in the ablation ladder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Inference branch `c_i` feeding fusion.
    pub ci: bool,
    /// Task-aware gates instead of plain projections.
    pub ta: bool,
    /// Gradient-regularization gates.
    pub gr: bool,
    /// Privileged-information fusion instead of a `c_i` passthrough.
    pub pi: bool,
}

impl Components {
    pub const NONE: Components = Components { ci: false, ta: false, gr: false, pi: false };
    pub const ALL: Components = Components { ci: true, ta: true, gr: true, pi: true };
    pub const NAMES: [&'static str; 4] = ["CI", "TA", "GR", "PI"];

    pub fn validate(&self) -> Result<()> {
        if (self.gr || self.pi) && !self.ci {
            return Err(Error::Config("components GR and PI require CI".into()));
        }
        Ok(())
    }
}

impl FromStr for Components {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut out = Components::NONE;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_uppercase().as_str() {
                "CI" => out.ci = true,
                "TA" => out.ta = true,
                "GR" => out.gr = true,
                "PI" => out.pi = true,
                _ => return Err(format!("unknown component {tok:?} (expected any of CI, TA, GR, PI)")),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = [self.ci, self.ta, self.gr, self.pi];
        let names: Vec<&str> = Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        f.write_str(&names.join(","))
    }
}

/// Whether privileged annotations are used at inference time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PiMode {
    #[default]
    #[serde(rename = "pi-full")]
    Full,
    #[serde(rename = "pi-train-only")]
    TrainOnly,
}

impl FromStr for PiMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pi-full" | "full" => Ok(PiMode::Full),
            "pi-train-only" | "train-only" => Ok(PiMode::TrainOnly),
            _ => Err(format!("unknown pi mode {s:?} (expected pi-full or pi-train-only)")),
        }
    }
}

impl fmt::Display for PiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PiMode::Full => "pi-full",
            PiMode::TrainOnly => "pi-train-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub dim: usize,
    pub content_dim: usize,
    pub lstm_input: usize,
    pub components: Components,
    pub pi_mode: PiMode,
    pub encoder_mode: EncoderMode,
    pub image_side: usize,
    pub encoder_channels: (usize, usize),
    /// Weight of the two auxiliary branch losses.
    pub branch_weight: f64,
    /// ℓ2 coefficient on the looked-up embedding rows.
    pub l2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Mf,
            dim: 32,
            content_dim: crate::dataset::FEATURE_DIM,
            lstm_input: 32,
            components: Components::ALL,
            pi_mode: PiMode::Full,
            encoder_mode: EncoderMode::Precomputed,
            image_side: 16,
            encoder_channels: (4, 8),
            branch_weight: 0.5,
            l2: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.components.validate()?;
        if self.dim == 0 || self.content_dim == 0 || self.lstm_input == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(self.branch_weight.is_finite() && self.branch_weight >= 0.0) {
            return Err(Error::Config(format!("branch weight must be ≥ 0, got {}", self.branch_weight)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be ≥ 0, got {}", self.l2)));
        }
        if self.encoder_mode == EncoderMode::Trainable && self.image_side < 5 {
            return Err(Error::Config("image side must be at least 5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub n_users: usize,
    pub n_items: usize,
    pub vocab: usize,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub biases: ScoreBiases,
    pub visual: VisualBranch,
    pub inference: Option<InferenceBranch>,
    pub semantic: Option<SemanticBranch>,
    pub aux: Option<AuxHeads>,
    pub fusion: FusionMlp,
    pub encoder: Option<ConvEncoder>,
}

/// Losses of one triple (or batch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TripleLoss {
    pub main: f64,
    pub visual: f64,
    pub semantic: f64,
    pub reg: f64,
}

impl TripleLoss {
    pub fn total(&self, branch_weight: f64) -> f64 {
        self.main + branch_weight * (self.visual + self.semantic) + self.reg
    }

    fn add(&mut self, o: &TripleLoss) {
        self.main += o.main;
        self.visual += o.visual;
        self.semantic += o.semantic;
        self.reg += o.reg;
    }

    fn scaled(&self, k: f64) -> TripleLoss {
        TripleLoss {
            main: self.main * k,
            visual: self.visual * k,
            semantic: self.semantic * k,
            reg: self.reg * k,
        }
    }
}

enum SemanticCache {
    Passthrough,
    Fusion(FusionCache),
}

/// User-independent item quantities computed once per gradient chunk.
struct ItemPre {
    e: Vec<f64>,
    enc: Option<EncoderCache>,
    /// Item part of the visual gate logits (gated visual only).
    visual_logits: Option<Vec<f64>>,
    /// Inference gate logits, or the plain projection output.
    inference: Option<Vec<f64>>,
}

/// Forward state of one (user, item) pair kept for the backward pass.
struct ItemPass {
    e: Vec<f64>,
    enc: Option<EncoderCache>,
    v: Vec<f64>,
    vcache: VisualCache,
    c: Option<(Vec<f64>, InferenceCache)>,
    s: Option<(Vec<f64>, SemanticCache)>,
    fusion_x: Vec<f64>,
    fusion_pre: Vec<f64>,
    f: Vec<f64>,
    score: f64,
}

impl Model {
    pub fn new(config: ModelConfig, n_users: usize, n_items: usize, vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_users == 0 || n_items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        let (d, c) = (config.dim, config.content_dim);
        let comp = config.components;
        let mut store = ParamStore::new();
        let users = EmbeddingTable::new(&mut store, "users", n_users, d, &mut rng::stream(seed, "init.users"));
        let items = EmbeddingTable::new(&mut store, "items", n_items, d, &mut rng::stream(seed, "init.items"));
        let vbpr_dim = (config.backbone == Backbone::Vbpr).then_some(c);
        let biases = ScoreBiases::new(&mut store, n_users, n_items, vbpr_dim, &mut rng::stream(seed, "init.biases"));

        let mut r = rng::stream(seed, "init.visual");
        let visual = if comp.ta {
            VisualBranch::Gated(VisualGate::new(&mut store, "visual", d, c, &mut r))
        } else {
            VisualBranch::Plain(LeakyDense::new(&mut store, "visual.proj", c, d, &mut r))
        };
        let mut r = rng::stream(seed, "init.inference");
        let inference = comp.ci.then(|| {
            if comp.ta {
                InferenceBranch::Gated(InferenceGate::new(&mut store, "inference", c, &mut r))
            } else {
                InferenceBranch::Plain(Dense::new(&mut store, "inference.proj", c, c, true, &mut r))
            }
        });
        let mut r = rng::stream(seed, "init.semantic");
        let semantic = comp.ci.then(|| {
            if comp.pi {
                SemanticBranch::Privileged(SemanticFusion::new(&mut store, "semantic", c, d, config.lstm_input, vocab, &mut r))
            } else {
                SemanticBranch::Passthrough(Dense::new(&mut store, "semantic.proj", c, d, true, &mut r))
            }
        });
        let aux = comp.ci.then(|| AuxHeads::new(&mut store, d, &mut rng::stream(seed, "init.aux")));
        let fusion_in = if comp.ci { 3 * d } else { 2 * d };
        let fusion = FusionMlp::new(&mut store, "fusion", fusion_in, d, &mut rng::stream(seed, "init.fusion"));
        let encoder = (config.encoder_mode == EncoderMode::Trainable).then(|| {
            ConvEncoder::new(
                &mut store,
                "encoder",
                config.image_side,
                config.encoder_channels,
                c,
                &mut rng::stream(seed, "init.encoder"),
            )
        });
        Ok(Self {
            config,
            store,
            n_users,
            n_items,
            vocab,
            users,
            items,
            biases,
            visual,
            inference,
            semantic,
            aux,
            fusion,
            encoder,
        })
    }

    /// Trainable scalars, including the gradient-regularization classifiers.
    pub fn num_parameters(&self) -> usize {
        let gr = if self.config.components.gr { 2 * QNET_SCALARS } else { 0 };
        self.store.num_scalars() + gr
    }

    pub fn param_names(&self) -> BTreeSet<String> {
        self.store.names().map(str::to_string).collect()
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.n_users {
            return Err(Error::Index { index: u, rows: self.n_users });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.n_items {
            return Err(Error::Index { index: i, rows: self.n_items });
        }
        Ok(())
    }

    /// `e_i` and, in trainable mode, the encoder cache.
    pub fn uniform_embedding(&self, content: &ContentTable, item: usize) -> Result<(Vec<f64>, Option<EncoderCache>)> {
        if item >= content.items.len() {
            return Err(Error::Content(item));
        }
        encode_uniform(item, content.get(item), self.config.encoder_mode, self.encoder.as_ref(), &self.store)
    }

    fn content_term(&self, user: usize, x: &[f64]) -> Result<f64> {
        match &self.biases.vbpr {
            Some(t) => {
                let a_u = t.user_content.lookup(&self.store, user)?;
                let b_c = &self.store.get(t.content_bias).data;
                crate::error::check_len("content vector", x.len(), a_u.len())?;
                Ok(dot(b_c, x) + dot(a_u, x))
            }
            None => Ok(0.0),
        }
    }

    /// Precomputes [`ItemPre`] for the distinct `items`, sweeping the large
    /// gate matrices once for all of them.
    fn precompute(&self, content: &ContentTable, items: &[usize]) -> Result<BTreeMap<usize, ItemPre>> {
        let mut ids: Vec<usize> = items.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut encoded = Vec::with_capacity(ids.len());
        for &i in &ids {
            self.check_item(i)?;
            encoded.push(self.uniform_embedding(content, i)?);
        }
        for (e, _) in &encoded {
            crate::error::check_len("uniform embedding", e.len(), self.config.content_dim)?;
        }
        let es: Vec<&[f64]> = encoded.iter().map(|(e, _)| e.as_slice()).collect();
        let mut visual = match &self.visual {
            VisualBranch::Gated(g) => g.item_logits_many(&self.store, &es).into_iter().map(Some).collect(),
            VisualBranch::Plain(_) => vec![None; ids.len()],
        };
        let mut inference = match &self.inference {
            Some(InferenceBranch::Gated(g)) => g.logits_many(&self.store, &es).into_iter().map(Some).collect(),
            Some(InferenceBranch::Plain(d)) => d.forward_many(&self.store, &es).into_iter().map(Some).collect(),
            None => vec![None; ids.len()],
        };
        let mut out = BTreeMap::new();
        for (k, ((e, enc), &i)) in encoded.into_iter().zip(&ids).enumerate() {
            out.insert(
                i,
                ItemPre {
                    e,
                    enc,
                    visual_logits: visual[k].take(),
                    inference: inference[k].take(),
                },
            );
        }
        Ok(out)
    }

    fn item_forward(&self, content: &ContentTable, user: usize, p: &[f64], item: usize, pre: &ItemPre, privileged: bool) -> Result<ItemPass> {
        let e = pre.e.clone();
        let enc = pre.enc.clone();
        let (v, vcache) = match (&self.visual, &pre.visual_logits) {
            (VisualBranch::Gated(g), Some(logits)) => {
                let (v, c) = g.forward_with_item_logits(&self.store, scale_gradient(&e), p, logits)?;
                (v, VisualCache::Gated(c))
            }
            _ => self.visual.forward(&self.store, scale_gradient(&e), p)?,
        };
        let c = match (&self.inference, &pre.inference) {
            (Some(InferenceBranch::Gated(g)), Some(logits)) => {
                let (c, cache) = g.forward_with_logits(&self.store, scale_gradient(&e), logits.clone())?;
                Some((c, InferenceCache::Gated(cache)))
            }
            (Some(InferenceBranch::Plain(_)), Some(out)) => Some((out.clone(), InferenceCache::Plain)),
            _ => None,
        };
        let q = self.items.lookup(&self.store, item)?;
        let s = match (&self.semantic, &c) {
            (Some(SemanticBranch::Passthrough(d)), Some((c, _))) => Some((d.forward(&self.store, c), SemanticCache::Passthrough)),
            (Some(SemanticBranch::Privileged(sf)), Some((c, _))) => {
                let s_hat = if privileged { Some(sf.encode_annotation(&self.store, &content.get(item).elements)?) } else { None };
                let arg = match &s_hat {
                    Some(s) => Privileged::Present(s),
                    None => Privileged::Absent,
                };
                let (s, cache) = sf.forward(&self.store, c, arg)?;
                Some((s, SemanticCache::Fusion(cache)))
            }
            _ => None,
        };
        let parts: Vec<&[f64]> = match &s {
            Some((s, _)) => vec![q, &v, s],
            None => vec![q, &v],
        };
        let (fusion_x, fusion_pre, f) = fuse_multimodal(&self.store, &self.fusion, &parts)?;
        let content_x: &[f64] = match &c {
            Some((c, _)) => c,
            None => &e,
        };
        let score = self.biases.alpha(&self.store)
            + self.biases.beta_user(&self.store, user)?
            + self.biases.beta_item(&self.store, item)?
            + dot(p, &f)
            + self.content_term(user, content_x)?;
        Ok(ItemPass { e, enc, v, vcache, c, s, fusion_x, fusion_pre, f, score })
    }

    /// Backward of `dscore · ŷ + ⟨dv_extra, v⟩ + ⟨ds_extra, s⟩`; returns `∂/∂p`.
    #[allow(clippy::too_many_arguments)]
    fn item_backward(
        &self,
        content: &ContentTable,
        user: usize,
        item: usize,
        p: &[f64],
        pass: &ItemPass,
        dscore: f64,
        dv_extra: Option<&[f64]>,
        ds_extra: Option<&[f64]>,
        scales: [f64; 2],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let store = &self.store;
        let d = self.config.dim;
        let need_e = self.encoder.is_some();
        let x: &[f64] = match &pass.c {
            Some((c, _)) => c,
            None => &pass.e,
        };
        let sg = match &self.biases.vbpr {
            Some(t) => score_vbpr_backward(
                p,
                &pass.f,
                store.get(t.user_content.id).row(user),
                x,
                &store.get(t.content_bias).data,
                dscore,
            ),
            None => score_mf_backward(p, &pass.f, dscore),
        };
        grads.dense_mut(self.biases.global)[0] += sg.bias;
        grads.row_mut(self.biases.user.id, user)[0] += sg.bias;
        grads.row_mut(self.biases.item.id, item)[0] += sg.bias;
        let mut dp = sg.p;
        let df = sg.f;
        let mut dc = self.inference.as_ref().map(|_| vec![0.0; self.config.content_dim]);
        let mut de_direct = Vec::new();
        if let Some(t) = &self.biases.vbpr {
            axpy(1.0, &sg.a_u, grads.row_mut(t.user_content.id, user));
            axpy(1.0, &sg.b_c, grads.dense_mut(t.content_bias));
            match dc.as_mut() {
                Some(dc) => axpy(1.0, &sg.c, dc),
                None => de_direct = sg.c,
            }
        }

        let dx = self.fusion.backward(store, &pass.fusion_x, &pass.fusion_pre, &df, grads, InputGrad::All);
        axpy(1.0, &dx[..d], grads.row_mut(self.items.id, item));
        let mut dv = dx[d..2 * d].to_vec();
        if let Some(extra) = dv_extra {
            axpy(1.0, extra, &mut dv);
        }

        if let (Some((_, scache)), Some(branch), Some((c, _))) = (&pass.s, &self.semantic, &pass.c) {
            let mut ds = dx[2 * d..].to_vec();
            if let Some(extra) = ds_extra {
                axpy(1.0, extra, &mut ds);
            }
            let dcv = dc.as_mut().expect("semantic branch implies inference branch");
            match (branch, scache) {
                (SemanticBranch::Passthrough(dense), SemanticCache::Passthrough) => {
                    let g = dense.backward(store, c, &ds, grads, InputGrad::All);
                    axpy(1.0, &g, dcv);
                }
                (SemanticBranch::Privileged(sf), SemanticCache::Fusion(cache)) => {
                    let (g, ds_hat) = sf.backward(store, cache, &ds, grads);
                    axpy(1.0, &g, dcv);
                    if !ds_hat.is_empty() {
                        sf.annotation_backward(&content.get(item).elements, grads, &ds_hat);
                    }
                }
                _ => unreachable!("semantic cache does not match branch"),
            }
        }

        let mut de = de_direct;
        if let (Some(branch), Some((_, icache)), Some(dc)) = (&self.inference, &pass.c, &dc) {
            let g = branch.backward(store, &pass.e, icache, dc, grads, need_e);
            if need_e {
                let g = scale_gradient_backward(&g, scales[1]);
                accumulate(&mut de, &g);
            }
        }
        let (g, dp_v) = self.visual.backward(store, &pass.e, &pass.vcache, &dv, grads, need_e);
        if !dp_v.is_empty() {
            axpy(1.0, &dp_v, &mut dp);
        }
        if need_e {
            let g = scale_gradient_backward(&g, scales[0]);
            accumulate(&mut de, &g);
        }
        if let (Some(enc), Some(cache)) = (&self.encoder, &pass.enc) {
            if !de.is_empty() {
                enc.backward(store, cache, &de, grads);
            }
        }
        dp
    }

    /// Composite loss of one triple; gradients of
    /// `main + λ (L_v + L_s) + reg` are accumulated into `grads`.
    /// `scales` are the gradient-regularization factors for the visual and
    /// semantic branch inputs.
    pub fn triple_grad(
        &self,
        content: &ContentTable,
        t: TrainingTriple,
        scales: [f64; 2],
        grads: &mut Grads,
    ) -> Result<TripleLoss> {
        let pre = self.precompute(content, &[t.pos, t.neg])?;
        self.triple_grad_pre(content, t, scales, &pre, grads)
    }

    fn triple_grad_pre(
        &self,
        content: &ContentTable,
        t: TrainingTriple,
        scales: [f64; 2],
        pre: &BTreeMap<usize, ItemPre>,
        grads: &mut Grads,
    ) -> Result<TripleLoss> {
        self.check_user(t.user)?;
        let p = self.users.lookup(&self.store, t.user)?;
        let pos = self.item_forward(content, t.user, p, t.pos, &pre[&t.pos], true)?;
        let neg = self.item_forward(content, t.user, p, t.neg, &pre[&t.neg], true)?;
        let mut loss = TripleLoss {
            main: bpr_loss(pos.score, neg.score),
            ..Default::default()
        };
        let dmain = bpr_loss_grad(pos.score, neg.score);
        let lambda = self.config.branch_weight;
        let mut dp = vec![0.0; self.config.dim];
        let mut extras: [[Option<Vec<f64>>; 2]; 2] = Default::default();

        if let (Some(aux), Some((s_pos, _)), Some((s_neg, _))) = (&self.aux, &pos.s, &neg.s) {
            let bv = branch_loss(&self.store, &aux.visual, p, &pos.v, &neg.v)?;
            let bs = branch_loss(&self.store, &aux.semantic, p, s_pos, s_neg)?;
            loss.visual = bv.loss;
            loss.semantic = bs.loss;
            let (dpv, dvp, dvn) = branch_loss_backward(&self.store, &aux.visual, p, &pos.v, &neg.v, &bv, lambda, grads);
            let (dps, dsp, dsn) = branch_loss_backward(&self.store, &aux.semantic, p, s_pos, s_neg, &bs, lambda, grads);
            axpy(1.0, &dpv, &mut dp);
            axpy(1.0, &dps, &mut dp);
            extras = [[Some(dvp), Some(dsp)], [Some(dvn), Some(dsn)]];
        }

        let [ex_pos, ex_neg] = &extras;
        let g = self.item_backward(content, t.user, t.pos, p, &pos, dmain, ex_pos[0].as_deref(), ex_pos[1].as_deref(), scales, grads);
        axpy(1.0, &g, &mut dp);
        let g = self.item_backward(content, t.user, t.neg, p, &neg, -dmain, ex_neg[0].as_deref(), ex_neg[1].as_deref(), scales, grads);
        axpy(1.0, &g, &mut dp);

        let l2 = self.config.l2;
        if l2 > 0.0 {
            let q_pos = self.items.lookup(&self.store, t.pos)?;
            let q_neg = self.items.lookup(&self.store, t.neg)?;
            loss.reg = l2 * (dot(p, p) + dot(q_pos, q_pos) + dot(q_neg, q_neg));
            axpy(2.0 * l2, p, &mut dp);
            axpy(2.0 * l2, q_pos, grads.row_mut(self.items.id, t.pos));
            axpy(2.0 * l2, q_neg, grads.row_mut(self.items.id, t.neg));
        }
        axpy(1.0, &dp, grads.row_mut(self.users.id, t.user));
        Ok(loss)
    }

    /// Loss of one triple (the gradient is computed and discarded).
    pub fn triple_loss(&self, content: &ContentTable, t: TrainingTriple) -> Result<TripleLoss> {
        let mut scratch = Grads::new_deferred(&self.store);
        self.triple_grad(content, t, [1.0; 2], &mut scratch)
    }

    /// Mean loss and mean gradient over a batch, computed in fixed-size
    /// chunks reduced in order.
    pub fn batch_grad(
        &self,
        content: &ContentTable,
        triples: &[TrainingTriple],
        scales: [f64; 2],
        exec: Exec,
    ) -> Result<(Grads, TripleLoss)> {
        if triples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let chunks: Vec<&[TrainingTriple]> = triples.chunks(GRAD_CHUNK).collect();
        let parts = map_slice(exec, &chunks, |chunk| -> Result<(Grads, TripleLoss)> {
            let items: Vec<usize> = chunk.iter().flat_map(|t| [t.pos, t.neg]).collect();
            let pre = self.precompute(content, &items)?;
            let mut g = Grads::new_deferred(&self.store);
            let mut sum = TripleLoss::default();
            for &t in chunk.iter() {
                sum.add(&self.triple_grad_pre(content, t, scales, &pre, &mut g)?);
            }
            g.flush(&self.store);
            Ok((g, sum))
        });
        let mut iter = parts.into_iter();
        let (mut grads, mut sum) = iter.next().expect("non-empty batch")?;
        for part in iter {
            let (g, s) = part?;
            grads.accumulate(&g);
            sum.add(&s);
        }
        let inv = 1.0 / triples.len() as f64;
        grads.scale(inv);
        Ok((grads, sum.scaled(inv)))
    }

    /// Score of one pair through the training forward path.
    pub fn score(&self, content: &ContentTable, user: usize, item: usize, privileged: bool) -> Result<f64> {
        self.check_user(user)?;
        let p = self.users.lookup(&self.store, user)?;
        let pre = self.precompute(content, &[item])?;
        Ok(self.item_forward(content, user, p, item, &pre[&item], privileged)?.score)
    }
}

fn accumulate(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        axpy(1.0, src, dst);
    }
}

/// User-independent item quantities cached for ranking.
#[derive(Debug, Clone)]
struct ItemCache {
    e: Vec<f64>,
    /// Gate logits (gated visual) or the finished `v_i` (plain visual).
    visual: Vec<f64>,
    s: Option<Vec<f64>>,
    content_x: Option<Vec<f64>>,
    beta: f64,
}

/// Read-only scorer with per-item caches, for evaluation and export.
#[derive(Debug)]
pub struct Scorer<'a> {
    model: &'a Model,
    items: Vec<ItemCache>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, content: &ContentTable, exec: Exec) -> Result<Self> {
        let privileged = model.config.pi_mode == PiMode::Full;
        let store = &model.store;
        let items = map_indexed(exec, model.n_items, |i| -> Result<ItemCache> {
            let (e, _) = model.uniform_embedding(content, i)?;
            let visual = match &model.visual {
                VisualBranch::Gated(g) => {
                    crate::error::check_len("visual gate e_i", e.len(), g.content_dim)?;
                    g.item_logits(store, &e)
                }
                VisualBranch::Plain(_) => model.visual.forward(store, &e, &[])?.0,
            };
            let c = match &model.inference {
                Some(b) => Some(b.forward(store, &e)?.0),
                None => None,
            };
            let s = match (&model.semantic, &c) {
                (Some(SemanticBranch::Passthrough(d)), Some(c)) => Some(d.forward(store, c)),
                (Some(SemanticBranch::Privileged(sf)), Some(c)) => {
                    let s_hat = if privileged { Some(sf.encode_annotation(store, &content.get(i).elements)?) } else { None };
                    let arg = match &s_hat {
                        Some(s) => Privileged::Present(s),
                        None => Privileged::Absent,
                    };
                    Some(sf.forward(store, c, arg)?.0)
                }
                _ => None,
            };
            let content_x = model.biases.vbpr.as_ref().map(|_| c.clone().unwrap_or_else(|| e.clone()));
            let beta = model.biases.beta_item(store, i)?;
            Ok(ItemCache { e, visual, s, content_x, beta })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, items })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Fused item representation `f_i` as seen by `user`.
    pub fn fused(&self, user: usize, item: usize) -> Result<Vec<f64>> {
        let m = self.model;
        m.check_user(user)?;
        m.check_item(item)?;
        let p = m.users.lookup(&m.store, user)?;
        let ul = match &m.visual {
            VisualBranch::Gated(g) => g.user_logits(&m.store, p),
            VisualBranch::Plain(_) => Vec::new(),
        };
        self.fused_with(&ul, item)
    }

    fn fused_with(&self, user_logits: &[f64], item: usize) -> Result<Vec<f64>> {
        let m = self.model;
        let ic = &self.items[item];
        let v = match &m.visual {
            VisualBranch::Gated(g) => g.finish(&m.store, &ic.e, &ic.visual, user_logits),
            VisualBranch::Plain(_) => ic.visual.clone(),
        };
        let q = m.items.lookup(&m.store, item)?;
        let parts: Vec<&[f64]> = match &ic.s {
            Some(s) => vec![q, &v, s],
            None => vec![q, &v],
        };
        Ok(fuse_multimodal(&m.store, &m.fusion, &parts)?.2)
    }

    /// Scores of `items` for `user`, aligned with the input.
    pub fn score_user(&self, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        let m = self.model;
        m.check_user(user)?;
        let p = m.users.lookup(&m.store, user)?;
        let ul = match &m.visual {
            VisualBranch::Gated(g) => g.user_logits(&m.store, p),
            VisualBranch::Plain(_) => Vec::new(),
        };
        let base = m.biases.alpha(&m.store) + m.biases.beta_user(&m.store, user)?;
        items
            .iter()
            .map(|&i| {
                m.check_item(i)?;
                let f = self.fused_with(&ul, i)?;
                let ic = &self.items[i];
                let extra = match &ic.content_x {
                    Some(x) => m.content_term(user, x)?,
                    None => 0.0,
                };
                Ok(base + ic.beta + dot(p, &f) + extra)
            })
            .collect()
    }
}
