use std::collections::BTreeSet;

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Train / valid / test shares of each user's history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.1,
            test: 0.3,
        }
    }
}

/// Chronological per-user split plus item popularity and the cold/warm flag.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
    /// Training interactions per item.
    pub item_train_count: Vec<usize>,
    /// `is_cold[i]` once [`partition_cold_warm`] has run; all `false` before.
    pub is_cold: Vec<bool>,
    pub boundary: Option<i64>,
    pub train_by_user: Vec<Vec<usize>>,
    pub valid_by_user: Vec<Vec<usize>>,
    pub test_by_user: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn cold_items(&self) -> BTreeSet<usize> {
        (0..self.n_items).filter(|&i| self.is_cold[i]).collect()
    }

    pub fn warm_items(&self) -> BTreeSet<usize> {
        (0..self.n_items).filter(|&i| !self.is_cold[i]).collect()
    }

    /// Every item the user touched in any split, sorted.
    pub fn all_items_of(&self, user: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.train_by_user[user]
            .iter()
            .chain(&self.valid_by_user[user])
            .chain(&self.test_by_user[user])
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn sort_dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Per user: sort by `(timestamp, item)`, the first `⌈train·n⌉` go to train,
/// the last `⌊test·n⌋` to test and the remainder to valid.
pub fn chronological_split(log: &InteractionLog, ratios: SplitRatios) -> Result<SplitDataset> {
    let sum = ratios.train + ratios.valid + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.valid, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {} + {} + {} = {sum}",
            ratios.train, ratios.valid, ratios.test
        )));
    }
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); log.n_users];
    for it in &log.interactions {
        per_user[it.user].push(*it);
    }
    let mut split = SplitDataset {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        n_users: log.n_users,
        n_items: log.n_items,
        item_train_count: vec![0; log.n_items],
        is_cold: vec![false; log.n_items],
        boundary: None,
        train_by_user: vec![Vec::new(); log.n_users],
        valid_by_user: vec![Vec::new(); log.n_users],
        test_by_user: vec![Vec::new(); log.n_users],
    };
    for (user, mut rows) in per_user.into_iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Config(format!("user {user} has no interactions")));
        }
        rows.sort_by_key(|it| (it.timestamp, it.item));
        let n = rows.len();
        let nf = n as f64;
        let n_train = ((ratios.train * nf - 1e-9).ceil() as usize).min(n);
        let n_test = ((ratios.test * nf + 1e-9).floor() as usize).min(n - n_train);
        let n_valid = n - n_train - n_test;
        let (train, rest) = rows.split_at(n_train);
        let (valid, test) = rest.split_at(n_valid);
        for it in train {
            split.item_train_count[it.item] += 1;
        }
        split.train_by_user[user] = sort_dedup(train.iter().map(|it| it.item).collect());
        split.valid_by_user[user] = sort_dedup(valid.iter().map(|it| it.item).collect());
        split.test_by_user[user] = sort_dedup(test.iter().map(|it| it.item).collect());
        split.train.extend_from_slice(train);
        split.valid.extend_from_slice(valid);
        split.test.extend_from_slice(test);
    }
    Ok(split)
}

/// Marks items with at most `boundary` training interactions as cold.
pub fn partition_cold_warm(mut split: SplitDataset, boundary: i64) -> Result<SplitDataset> {
    if boundary < 0 {
        return Err(Error::Config(format!("cold boundary must be >= 0, got {boundary}")));
    }
    split.is_cold = split
        .item_train_count
        .iter()
        .map(|&c| (c as i64) <= boundary)
        .collect();
    split.boundary = Some(boundary);
    Ok(split)
}
