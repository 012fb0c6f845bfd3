//! Sampled top-K ranking evaluation over cold, warm and all item slices.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_candidates, ContentTable, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{Model, Scorer};
use crate::par::{map_indexed, Exec};
use crate::rng;

/// Candidates ordered by descending score, ties by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn new(candidates: &[usize], scores: &[f64]) -> Result<Self> {
        crate::error::check_len("candidate scores", scores.len(), candidates.len())?;
        crate::error::check_finite("candidate scores", scores)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
        Ok(Self {
            items: order.iter().map(|&k| candidates[k]).collect(),
            scores: order.iter().map(|&k| scores[k]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `|top-k ∩ positives| / |positives|`, or `None` without positives.
pub fn recall_at_k(ranked: &RankedList, positives: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = ranked.items.iter().take(k).filter(|i| positives.contains(i)).count();
    Some(hits as f64 / positives.len() as f64)
}

/// Binary-relevance NDCG@k, or `None` without positives.
pub fn ndcg_at_k(ranked: &RankedList, positives: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.contains(i))
        .map(|(r, _)| gain(r + 1))
        .sum();
    let idcg: f64 = (1..=k.min(positives.len())).map(gain).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Sampling protocol: `k`, negatives per user and one seed per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub k: usize,
    pub n_neg: usize,
    pub seeds: Vec<u64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self::with_runs(10, 500, 5, 42)
    }
}

impl Protocol {
    /// `runs` consecutive seeds starting at `base_seed`.
    pub fn with_runs(k: usize, n_neg: usize, runs: usize, base_seed: u64) -> Self {
        Self {
            k,
            n_neg,
            seeds: (0..runs as u64).map(|r| base_seed.wrapping_add(r)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one evaluation run is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub recall: f64,
    pub ndcg: f64,
    /// Users with at least one positive in the slice.
    pub users: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceSet {
    pub cold: SliceMetrics,
    pub warm: SliceMetrics,
    pub all: SliceMetrics,
}

impl SliceSet {
    fn slices_mut(&mut self) -> [&mut SliceMetrics; 3] {
        [&mut self.cold, &mut self.warm, &mut self.all]
    }

    pub fn slices(&self) -> [&SliceMetrics; 3] {
        [&self.cold, &self.warm, &self.all]
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| [s.recall, s.ndcg])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub metrics: SliceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub n_neg: usize,
    pub runs: Vec<RunReport>,
    pub mean: SliceSet,
    /// Users left out for lack of positives.
    pub skipped_users: usize,
}

/// Which per-user item lists count as positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Train,
    Valid,
    Test,
}

fn positives_of(split: &SplitDataset, target: Target, user: usize) -> &[usize] {
    match target {
        Target::Train => &split.train_by_user[user],
        Target::Valid => &split.valid_by_user[user],
        Target::Test => &split.test_by_user[user],
    }
}

/// Per-user metrics `[cold, warm, all]`, `None` where a slice is empty.
type UserRow = [Option<(f64, f64)>; 3];

fn evaluate_user(
    scorer: &Scorer<'_>,
    split: &SplitDataset,
    target: Target,
    user: usize,
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Result<UserRow> {
    let mut positives = positives_of(split, target, user).to_vec();
    positives.sort_unstable();
    positives.dedup();
    if positives.is_empty() {
        return Ok([None; 3]);
    }
    let forbidden = split.all_items_of(user);
    let mut r = rng::substream(seed, "eval-candidates", user as u64);
    let candidates = build_candidates(&positives, &forbidden, split.n_items, n_neg, &mut r)?;
    let scores = scorer.score_user(user, &candidates)?;
    let ranked = RankedList::new(&candidates, &scores)?;
    let all: BTreeSet<usize> = positives.iter().copied().collect();
    let (cold, warm): (BTreeSet<usize>, BTreeSet<usize>) = all.iter().partition(|&&i| split.is_cold[i]);
    let metric = |set: &BTreeSet<usize>| Some((recall_at_k(&ranked, set, k)?, ndcg_at_k(&ranked, set, k)?));
    Ok([metric(&cold), metric(&warm), metric(&all)])
}

fn reduce(rows: &[UserRow]) -> SliceSet {
    let mut out = SliceSet::default();
    for (s, slot) in out.slices_mut().into_iter().enumerate() {
        let (mut r, mut n, mut users) = (0.0, 0.0, 0usize);
        for row in rows {
            if let Some((rr, nn)) = row[s] {
                r += rr;
                n += nn;
                users += 1;
            }
        }
        if users > 0 {
            slot.recall = r / users as f64;
            slot.ndcg = n / users as f64;
        }
        slot.users = users;
    }
    out
}

fn mean_of(runs: &[RunReport]) -> SliceSet {
    let mut out = SliceSet::default();
    let n = runs.len() as f64;
    for (s, slot) in out.slices_mut().into_iter().enumerate() {
        let (mut r, mut g) = (0.0, 0.0);
        for run in runs {
            let m = run.metrics.slices()[s];
            r += m.recall;
            g += m.ndcg;
            slot.users = m.users;
        }
        slot.recall = r / n;
        slot.ndcg = g / n;
    }
    out
}

/// Evaluates `target` positives with a prepared scorer.
pub fn evaluate_with(
    scorer: &Scorer<'_>,
    split: &SplitDataset,
    target: Target,
    protocol: &Protocol,
    exec: Exec,
) -> Result<MetricsReport> {
    protocol.validate()?;
    let mut runs = Vec::with_capacity(protocol.seeds.len());
    let mut skipped = 0;
    for &seed in &protocol.seeds {
        let rows = map_indexed(exec, split.n_users, |u| {
            evaluate_user(scorer, split, target, u, protocol.k, protocol.n_neg, seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        skipped = rows.iter().filter(|r| r[2].is_none()).count();
        runs.push(RunReport { seed, metrics: reduce(&rows) });
    }
    Ok(MetricsReport {
        k: protocol.k,
        n_neg: protocol.n_neg,
        mean: mean_of(&runs),
        runs,
        skipped_users: skipped,
    })
}

/// Test-split evaluation of a trained model.
pub fn evaluate_model(
    model: &Model,
    split: &SplitDataset,
    content: &ContentTable,
    protocol: &Protocol,
    exec: Exec,
) -> Result<MetricsReport> {
    let scorer = Scorer::new(model, content, exec)?;
    evaluate_with(&scorer, split, Target::Test, protocol, exec)
}

/// Aligned text table, one row per labelled result, four decimals.
pub fn render_table(k: usize, rows: &[(String, SliceSet)]) -> String {
    let headers = [
        "Model".to_string(),
        format!("Cold R@{k}"),
        format!("Cold NDCG@{k}"),
        format!("Warm R@{k}"),
        format!("Warm NDCG@{k}"),
        format!("All R@{k}"),
        format!("All NDCG@{k}"),
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, m)| {
            std::iter::once(label.clone())
                .chain(m.values().map(|v| format!("{v:.4}")))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&headers);
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
