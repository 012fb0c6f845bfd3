//! Epoch loop, optimizers, learning-rate decay, early stopping and the
//! ablation ladder.

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_training_triples, ContentTable, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, evaluate_with, Protocol, SliceSet, Target};
use crate::grad_reg::{GateDecision, GradRegConfig, GradRegController};
use crate::model::{Components, Model, ModelConfig, TripleLoss};
use crate::optim::{apply_lr_decay, Adagrad};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::rng;
use crate::scoring::Backbone;

pub const DIM_GRID: [usize; 4] = [32, 64, 128, 256];
pub const BATCH_GRID: [usize; 4] = [32, 64, 128, 256];
pub const DECAY_GRID: [f64; 2] = [0.1, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_rec: f64,
    pub lr_dqn: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Negatives per user for the validation ranking.
    pub valid_n_neg: usize,
    pub grad_reg: GradRegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 64,
            lr_rec: 0.05,
            lr_dqn: 0.001,
            decay_rate: 0.5,
            decay_every: 4,
            epochs: 30,
            seed: 0,
            patience: 5,
            valid_n_neg: 100,
            grad_reg: GradRegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !DIM_GRID.contains(&self.model.dim) {
            return bad(format!("dim must be one of {DIM_GRID:?}, got {}", self.model.dim));
        }
        if !BATCH_GRID.contains(&self.batch_size) {
            return bad(format!("batch size must be one of {BATCH_GRID:?}, got {}", self.batch_size));
        }
        if !(1e-4..=0.5).contains(&self.lr_rec) {
            return bad(format!("lr_rec must lie in [0.0001, 0.5], got {}", self.lr_rec));
        }
        if !(1e-5..=0.005).contains(&self.lr_dqn) {
            return bad(format!("lr_dqn must lie in [0.00001, 0.005], got {}", self.lr_dqn));
        }
        if !DECAY_GRID.contains(&self.decay_rate) {
            return bad(format!("decay rate must be one of {DECAY_GRID:?}, got {}", self.decay_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-epoch summary; serialises to one line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_main: f64,
    pub loss_v: f64,
    pub loss_s: f64,
    pub lr: f64,
    #[serde(rename = "valid_R@10")]
    pub valid_recall: Option<f64>,
    #[serde(skip)]
    pub batch_losses: Vec<TripleLoss>,
}

/// Optimizer and gate state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adagrad: Adagrad,
    pub controller: Option<GradRegController>,
    pub lr_rec: f64,
    pub lr_dqn: f64,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        let controller = if model.config.components.gr {
            let gr = GradRegConfig { lr: config.lr_dqn, ..config.grad_reg.clone() };
            Some(GradRegController::new(gr, rng::stream_seed(config.seed, "grad_reg")))
        } else {
            None
        };
        Ok(Self {
            adagrad: Adagrad::new(&model.store, config.lr_rec),
            controller: controller.transpose()?,
            lr_rec: config.lr_rec,
            lr_dqn: config.lr_dqn,
        })
    }
}

/// One pass over freshly sampled triples; `epoch` is 1-based.
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    split: &SplitDataset,
    content: &ContentTable,
    config: &TrainConfig,
    epoch: usize,
    exec: Exec,
) -> Result<EpochStats> {
    let seed = rng::stream_seed(config.seed, &format!("epoch-{epoch}"));
    let triples = sample_training_triples(split, seed)?;
    let n_batches = triples.len().div_ceil(config.batch_size);
    state.adagrad.lr = state.lr_rec;
    let mut batch_losses = Vec::with_capacity(n_batches);
    let mut sum = [0.0; 3];
    for (b, batch) in triples.chunks(config.batch_size).enumerate() {
        let scales = match state.controller.as_mut() {
            Some(ctl) => ctl.begin_batch(b, n_batches).map(|a| a.scale),
            None => [1.0, 1.0],
        };
        let (grads, loss) = model.batch_grad(content, batch, scales, exec)?;
        let total = loss.total(model.config.branch_weight);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at epoch {epoch}, batch {b}")));
        }
        state.adagrad.step(&mut model.store, &grads);
        if let Some(ctl) = state.controller.as_mut() {
            ctl.end_batch([loss.visual, loss.semantic], state.lr_dqn)?;
        }
        let w = batch.len() as f64;
        sum[0] += loss.main * w;
        sum[1] += loss.visual * w;
        sum[2] += loss.semantic * w;
        batch_losses.push(loss);
    }
    if let Some(ctl) = state.controller.as_mut() {
        ctl.end_epoch();
    }
    let n = triples.len() as f64;
    let stats = EpochStats {
        epoch,
        loss_main: sum[0] / n,
        loss_v: sum[1] / n,
        loss_s: sum[2] / n,
        lr: state.lr_rec,
        valid_recall: None,
        batch_losses,
    };
    state.lr_rec = apply_lr_decay(state.lr_rec, epoch, config.decay_every, config.decay_rate);
    state.lr_dqn = apply_lr_decay(state.lr_dqn, epoch, config.decay_every, config.decay_rate);
    Ok(stats)
}

/// A trained model with its history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (the last one without early stopping).
    pub best_epoch: usize,
    pub gate_trace: Vec<GateDecision>,
}

fn validation_recall(model: &Model, split: &SplitDataset, content: &ContentTable, config: &TrainConfig, exec: Exec) -> Result<f64> {
    let protocol = Protocol::with_runs(10, config.valid_n_neg, 1, rng::stream_seed(config.seed, "validation"));
    let scorer = crate::model::Scorer::new(model, content, exec)?;
    Ok(evaluate_with(&scorer, split, Target::Valid, &protocol, exec)?.mean.all.recall)
}

/// Full training run with early stopping on validation all-slice R@10.
pub fn fit(
    config: &TrainConfig,
    split: &SplitDataset,
    content: &ContentTable,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_seed = rng::stream_seed(config.seed, "model");
    let mut model = Model::new(config.model.clone(), split.n_users, split.n_items, content.vocab_size, model_seed)?;
    let mut state = TrainState::new(&model, config)?;
    let validate = config.patience > 0 && !split.valid.is_empty();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut trace = Vec::new();
    for epoch in 1..=config.epochs {
        let mut stats = train_epoch(&mut model, &mut state, split, content, config, epoch, exec)?;
        if let Some(ctl) = state.controller.as_mut() {
            trace.extend(ctl.drain_trace());
        }
        if validate {
            let r = validation_recall(&model, split, content, config, exec)?;
            stats.valid_recall = Some(r);
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        on_epoch(&stats);
        epochs.push(stats);
        if validate && since_best >= config.patience {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => epochs.len(),
    };
    Ok(TrainOutcome { model, epochs, best_epoch, gate_trace: trace })
}

/// The cumulative ablation ladder.
pub const ABLATION_LADDER: [(&str, Components); 5] = [
    ("Base", Components::NONE),
    ("Base+CI", Components { ci: true, ta: false, gr: false, pi: false }),
    ("Base+CI+TA", Components { ci: true, ta: true, gr: false, pi: false }),
    ("Base+CI+TA+GR", Components { ci: true, ta: true, gr: true, pi: false }),
    ("Base+CI+TA+GR+PI", Components::ALL),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub components: String,
    pub parameters: usize,
    pub metrics: SliceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub backbone: Backbone,
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Text table with the cold/warm/all Recall@K columns.
    pub fn render(&self) -> String {
        let k = self.k;
        let header = [
            "Variant".to_string(),
            "Params".to_string(),
            format!("Cold R@{k}"),
            format!("Warm R@{k}"),
            format!("All R@{k}"),
        ];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    r.parameters.to_string(),
                    format!("{:.4}", r.metrics.cold.recall),
                    format!("{:.4}", r.metrics.warm.recall),
                    format!("{:.4}", r.metrics.all.recall),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String; 5]| {
            let parts: Vec<String> = (0..5)
                .map(|c| if c == 0 { format!("{:<w$}", cells[c], w = widths[c]) } else { format!("{:>w$}", cells[c], w = widths[c]) })
                .collect();
            parts.join("  ")
        };
        let mut out = format!("{} backbone\n{}\n", self.backbone.to_string().to_uppercase(), line(&header));
        for r in &body {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Trains every ladder variant with the same seed and data and evaluates
/// each on the test split.
pub fn run_ablation(
    base: &TrainConfig,
    split: &SplitDataset,
    content: &ContentTable,
    protocol: &Protocol,
    exec: Exec,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ABLATION_LADDER.len());
    for (name, components) in ABLATION_LADDER {
        let mut config = base.clone();
        config.model.components = components;
        let outcome = fit(&config, split, content, exec, |_| {})?;
        let report = evaluate_model(&outcome.model, split, content, protocol, exec)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            components: components.to_string(),
            parameters: outcome.model.num_parameters(),
            metrics: report.mean,
        });
    }
    Ok(AblationTable { backbone: base.model.backbone, k: protocol.k, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.model.dim = 28;
        assert!(c.validate().is_err());
        c.model.dim = 128;
        c.decay_rate = 0.3;
        assert!(c.validate().is_err());
        c.decay_rate = 0.1;
        c.lr_rec = 0.9;
        assert!(c.validate().is_err());
        c.lr_rec = 0.05;
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn decay_examples() {
        assert_eq!(apply_lr_decay(0.1, 4, 4, 0.5), 0.05);
        assert_eq!(apply_lr_decay(0.1, 3, 4, 0.5), 0.1);
        let twice = apply_lr_decay(apply_lr_decay(0.1, 4, 4, 0.1), 8, 4, 0.1);
        assert!((twice - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ladder_is_cumulative() {
        for w in ABLATION_LADDER.windows(2) {
            let (a, b) = (w[0].1, w[1].1);
            assert!(!a.ci || b.ci);
            assert!(!a.ta || b.ta);
            assert!(!a.gr || b.gr);
            assert!(!a.pi || b.pi);
            assert_ne!(a, b);
        }
    }
}
