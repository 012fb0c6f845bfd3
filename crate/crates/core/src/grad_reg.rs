//! Gradient-regularization gates.
//!
//! Each branch (visual, semantic) has a controller that, once per batch,
//! reads a 5-d state and picks one of five gradient scales for the gradient
//! the branch sends back into the shared content embedding. The forward pass
//! is untouched. The classifier is a dense 5→5 layer with softmax; after the
//! next batch reports the branch loss `L`, the chosen action is reinforced
//! with the one-step loss `-ln σ(s_max · exp(-L))`.
//!
//! State layout: `[own loss(t-1), other loss(t-1), own/other clamped to
//! [0, 10], previous scale, batch progress]`. Before any batch has run both
//! losses default to `ln 2` (BPR at zero margin) and the scale to 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{neg_log_sigmoid, sigmoid, softmax, Dense, InputGrad};
use crate::optim::Adam;
use crate::params::{Grads, ParamStore};
use crate::rng::{self, StreamRng};

pub const ACTION_SCALES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const STATE_DIM: usize = 5;
pub const RATIO_CLAMP: f64 = 10.0;
/// Scalars of one action classifier.
pub const QNET_SCALARS: usize = STATE_DIM * ACTION_SCALES.len() + ACTION_SCALES.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Visual,
    Semantic,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Visual, Branch::Semantic];

    fn index(self) -> usize {
        match self {
            Branch::Visual => 0,
            Branch::Semantic => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqnState(pub [f64; STATE_DIM]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateAction {
    pub index: usize,
    pub scale: f64,
    /// Softmax probability of the chosen index.
    pub s_max: f64,
}

/// Branch losses of the previous batch and the scales applied in it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub last: Option<[f64; 2]>,
    pub prev_scale: Option<[f64; 2]>,
}

pub fn build_state(history: &LossHistory, branch: Branch, batch_index: usize, n_batches: usize) -> DqnState {
    let ln2 = std::f64::consts::LN_2;
    let [lv, ls] = history.last.unwrap_or([ln2, ln2]);
    let (own, other) = match branch {
        Branch::Visual => (lv, ls),
        Branch::Semantic => (ls, lv),
    };
    let ratio = if other > 0.0 {
        (own / other).clamp(0.0, RATIO_CLAMP)
    } else if own > 0.0 {
        RATIO_CLAMP
    } else {
        1.0
    };
    let prev = history.prev_scale.map(|s| s[branch.index()]).unwrap_or(1.0);
    let progress = if n_batches == 0 {
        0.0
    } else {
        (batch_index as f64 / n_batches as f64).clamp(0.0, 1.0)
    };
    DqnState([own, other, ratio, prev, progress])
}

/// Action classifier: dense 5→5 followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub dense: Dense,
}

impl QNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        Self {
            dense: Dense::new(store, name, STATE_DIM, ACTION_SCALES.len(), true, rng),
        }
    }

    pub fn probabilities(&self, store: &ParamStore, state: &DqnState) -> Vec<f64> {
        softmax(&self.dense.forward(store, &state.0))
    }

    /// Accumulates the gradient of the one-step loss for `action` with
    /// reward `reward` (treated as a constant). Returns the loss.
    pub fn reinforce_backward(&self, store: &ParamStore, state: &DqnState, action: usize, reward: f64, grads: &mut Grads) -> f64 {
        let p = self.probabilities(store, state);
        let s_max = p[action];
        let loss = neg_log_sigmoid(s_max * reward);
        let dl_ds = dqn_loss_grad(s_max, reward);
        let dlogits: Vec<f64> = (0..p.len())
            .map(|k| {
                let kron = if k == action { 1.0 } else { 0.0 };
                dl_ds * s_max * (kron - p[k])
            })
            .collect();
        self.dense.backward(store, &state.0, &dlogits, grads, InputGrad::None);
        loss
    }
}

/// ε-greedy selection: argmax of the softmax (lowest index on ties) with
/// probability `1 - explore_rate`, otherwise a uniform index.
pub fn select_action<R: Rng>(state: &DqnState, qnet: &QNet, store: &ParamStore, explore_rate: f64, rng: &mut R) -> GateAction {
    let p = qnet.probabilities(store, state);
    let explore = explore_rate > 0.0 && rng.random::<f64>() < explore_rate;
    let index = if explore {
        rng.random_range(0..ACTION_SCALES.len())
    } else {
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    };
    GateAction {
        index,
        scale: ACTION_SCALES[index],
        s_max: p[index],
    }
}

/// Identity in the forward direction.
#[inline]
pub fn scale_gradient(x: &[f64]) -> &[f64] {
    x
}

/// Backward of [`scale_gradient`]: the incoming gradient times `scale`.
pub fn scale_gradient_backward(grad: &[f64], scale: f64) -> Vec<f64> {
    grad.iter().map(|g| g * scale).collect()
}

/// `J = exp(-L)` for the branch loss of the following batch.
pub fn compute_reward(branch_loss_next: f64) -> Result<f64> {
    if !(branch_loss_next >= 0.0) {
        return Err(Error::Numeric(format!(
            "branch loss must be finite and non-negative, got {branch_loss_next}"
        )));
    }
    Ok((-branch_loss_next).exp())
}

/// `-ln σ(s_max · J)`.
pub fn dqn_loss(s_max: f64, reward: f64) -> Result<f64> {
    for (name, v) in [("s_max", s_max), ("reward", reward)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Domain(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    Ok(neg_log_sigmoid(s_max * reward))
}

/// `∂/∂s_max` of [`dqn_loss`].
pub fn dqn_loss_grad(s_max: f64, reward: f64) -> f64 {
    -reward * (1.0 - sigmoid(s_max * reward))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "scale")]
pub enum GateMode {
    /// Classifiers choose actions and learn from rewards.
    Learned,
    /// Classifiers choose actions but never update.
    Frozen,
    /// Every action is the given scale; classifiers never update.
    Forced(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRegConfig {
    pub explore_start: f64,
    pub explore_decay: f64,
    pub lr: f64,
    pub mode: GateMode,
    /// Initialise classifier weights at zero (uniform softmax).
    pub zero_init: bool,
}

impl Default for GradRegConfig {
    fn default() -> Self {
        Self {
            explore_start: 0.1,
            explore_decay: 0.99,
            lr: 0.001,
            mode: GateMode::Learned,
            zero_init: false,
        }
    }
}

/// One resolved gate decision, as written to the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub batch: u64,
    pub branch: Branch,
    pub state: [f64; STATE_DIM],
    pub action_index: usize,
    pub scale: f64,
    pub s_max: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    batch: u64,
    states: [DqnState; 2],
    actions: [GateAction; 2],
}

/// Both gates, their optimizer and the cross-batch bookkeeping.
#[derive(Debug, Clone)]
pub struct GradRegController {
    pub store: ParamStore,
    pub qnets: [QNet; 2],
    pub config: GradRegConfig,
    pub explore_rate: f64,
    pub history: LossHistory,
    adam: Adam,
    rng: StreamRng,
    pending: Option<Pending>,
    batch_counter: u64,
    current: Option<Pending>,
    pub trace: Vec<GateDecision>,
}

impl GradRegController {
    pub fn new(config: GradRegConfig, seed: u64) -> Result<Self> {
        if let GateMode::Forced(s) = config.mode {
            if !ACTION_SCALES.contains(&s) {
                return Err(Error::Config(format!("forced scale {s} is not in {ACTION_SCALES:?}")));
            }
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, "grad_reg.init");
        let qnets = [
            QNet::new(&mut store, "grad_reg.visual", &mut init),
            QNet::new(&mut store, "grad_reg.semantic", &mut init),
        ];
        if config.zero_init {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                store.get_mut(id).data.fill(0.0);
            }
        }
        let adam = Adam::new(&store, config.lr);
        Ok(Self {
            store,
            qnets,
            explore_rate: config.explore_start,
            config,
            history: LossHistory::default(),
            adam,
            rng: rng::stream(seed, "grad_reg.explore"),
            pending: None,
            batch_counter: 0,
            current: None,
            trace: Vec::new(),
        })
    }

    /// Chooses this batch's `[visual, semantic]` actions.
    pub fn begin_batch(&mut self, batch_index: usize, n_batches: usize) -> [GateAction; 2] {
        let states = Branch::BOTH.map(|b| build_state(&self.history, b, batch_index, n_batches));
        let actions = match self.config.mode {
            GateMode::Forced(s) => {
                let index = ACTION_SCALES.iter().position(|&a| a == s).expect("validated");
                [0, 1].map(|k| GateAction {
                    index,
                    scale: s,
                    s_max: self.qnets[k].probabilities(&self.store, &states[k])[index],
                })
            }
            GateMode::Learned | GateMode::Frozen => [0, 1].map(|k| {
                select_action(&states[k], &self.qnets[k], &self.store, self.explore_rate, &mut self.rng)
            }),
        };
        self.current = Some(Pending {
            batch: self.batch_counter,
            states,
            actions,
        });
        actions
    }

    /// Reports this batch's branch losses: resolves the previous batch's
    /// decision with reward `exp(-L)` and queues the current one.
    pub fn end_batch(&mut self, losses: [f64; 2], lr: f64) -> Result<()> {
        if let Some(prev) = self.pending.take() {
            let mut grads = Grads::new(&self.store);
            for k in 0..2 {
                let reward = compute_reward(losses[k])?;
                self.trace.push(GateDecision {
                    batch: prev.batch,
                    branch: Branch::BOTH[k],
                    state: prev.states[k].0,
                    action_index: prev.actions[k].index,
                    scale: prev.actions[k].scale,
                    s_max: prev.actions[k].s_max,
                    reward,
                });
                if self.config.mode == GateMode::Learned {
                    self.qnets[k].reinforce_backward(&self.store, &prev.states[k], prev.actions[k].index, reward, &mut grads);
                }
            }
            if self.config.mode == GateMode::Learned {
                self.adam.lr = lr;
                self.adam.step(&mut self.store, &grads);
            }
        }
        let current = self.current.take().ok_or_else(|| Error::Config("end_batch without begin_batch".into()))?;
        self.history.last = Some(losses);
        self.history.prev_scale = Some([current.actions[0].scale, current.actions[1].scale]);
        self.pending = Some(current);
        self.batch_counter += 1;
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.explore_rate *= self.config.explore_decay;
    }

    pub fn drain_trace(&mut self) -> Vec<GateDecision> {
        std::mem::take(&mut self.trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;

    #[test]
    fn cold_start_state() {
        let s = build_state(&LossHistory::default(), Branch::Visual, 0, 10);
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(s.0, [ln2, ln2, 1.0, 1.0, 0.0]);
        assert!((s.0[0] - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn state_fields_from_history() {
        let h = LossHistory {
            last: Some([0.5, 0.25]),
            prev_scale: Some([1.5, 0.5]),
        };
        assert_eq!(build_state(&h, Branch::Visual, 3, 10).0, [0.5, 0.25, 2.0, 1.5, 0.3]);
        assert_eq!(build_state(&h, Branch::Semantic, 3, 10).0, [0.25, 0.5, 0.5, 0.5, 0.3]);
        let big = LossHistory {
            last: Some([1e6, 1.0]),
            prev_scale: None,
        };
        assert_eq!(build_state(&big, Branch::Visual, 0, 1).0[2], 10.0);
    }

    fn qnet_with_logits(logits: [f64; 5]) -> (ParamStore, QNet) {
        let mut store = ParamStore::new();
        let q = QNet::new(&mut store, "q", &mut rng::stream(0, "q"));
        store.get_mut(q.dense.weight).data.fill(0.0);
        *store.get_mut(q.dense.bias.unwrap()) = Tensor::from_vec(1, 5, logits.to_vec());
        (store, q)
    }

    #[test]
    fn greedy_selection() {
        let (store, q) = qnet_with_logits([9.0, 0.0, 0.0, 0.0, 0.0]);
        let s = DqnState([0.1, 0.2, 0.3, 0.4, 0.5]);
        let a = select_action(&s, &q, &store, 0.0, &mut rng::stream(1, "x"));
        assert_eq!(a.index, 0);
        let expected = 9f64.exp() / (9f64.exp() + 4.0);
        assert!((a.s_max - expected).abs() < 1e-12);
        assert!((a.s_max - 0.9996).abs() < 1e-4);
    }

    #[test]
    fn uniform_classifier_and_seeded_exploration() {
        let (store, q) = qnet_with_logits([0.0; 5]);
        let s = DqnState([0.0; 5]);
        let a = select_action(&s, &q, &store, 0.0, &mut rng::stream(1, "x"));
        assert!((a.s_max - 0.2).abs() < 1e-15);
        let picks = |seed| {
            let mut r = rng::stream(seed, "x");
            (0..20).map(|_| select_action(&s, &q, &store, 1.0, &mut r).index).collect::<Vec<_>>()
        };
        assert_eq!(picks(4), picks(4));
        assert!(picks(4).iter().any(|&i| i != 0));
    }

    #[test]
    fn reward_and_loss_anchors() {
        assert_eq!(compute_reward(0.0).unwrap(), 1.0);
        assert!((compute_reward(std::f64::consts::LN_2).unwrap() - 0.5).abs() < 1e-12);
        assert!(compute_reward(-1.0).is_err());
        assert!(compute_reward(800.0).unwrap() < 1e-300);
        let closed = (1.0 + (-1f64).exp()).ln();
        assert!((dqn_loss(1.0, 1.0).unwrap() - closed).abs() < 1e-12);
        assert!((dqn_loss(1e-12, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(dqn_loss(0.0, 1.0).is_err());
        assert!(dqn_loss(0.5, 1.5).is_err());
    }

    #[test]
    fn scale_gradient_is_identity_forward() {
        let x = [1.5, -2.0, f64::MIN_POSITIVE];
        assert_eq!(scale_gradient(&x), &x);
        assert_eq!(scale_gradient_backward(&[2.0, -1.0], 0.0), vec![0.0, -0.0]);
        assert_eq!(scale_gradient_backward(&[2.0, -1.0], 1.5), vec![3.0, -1.5]);
    }

    #[test]
    fn one_step_raises_chosen_probability() {
        let (store, q) = qnet_with_logits([0.3, -0.2, 0.1, 0.0, 0.5]);
        let s = DqnState([0.7, 0.6, 1.1, 1.0, 0.2]);
        for action in 0..5 {
            let mut st = store.clone();
            let before = q.probabilities(&st, &s)[action];
            let mut g = Grads::new(&st);
            q.reinforce_backward(&st, &s, action, 1.0, &mut g);
            let mut opt = Adam::new(&st, 0.01);
            opt.step(&mut st, &g);
            assert!(q.probabilities(&st, &s)[action] > before, "action {action}");
        }
    }

    #[test]
    fn controller_resolves_with_next_batch_loss() {
        let mut c = GradRegController::new(GradRegConfig::default(), 3).unwrap();
        c.begin_batch(0, 3);
        c.end_batch([0.6, 0.7], 0.001).unwrap();
        assert!(c.trace.is_empty());
        c.begin_batch(1, 3);
        c.end_batch([0.5, 0.4], 0.001).unwrap();
        assert_eq!(c.trace.len(), 2);
        assert_eq!(c.trace[0].batch, 0);
        assert!((c.trace[0].reward - (-0.5f64).exp()).abs() < 1e-15);
        assert!((c.trace[1].reward - (-0.4f64).exp()).abs() < 1e-15);
        assert!(GradRegController::new(
            GradRegConfig { mode: GateMode::Forced(0.7), ..GradRegConfig::default() },
            0
        )
        .is_err());
    }
}
