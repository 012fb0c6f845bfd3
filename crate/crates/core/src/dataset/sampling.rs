use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::SplitDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// One epoch of BPR triples: every training interaction once, in a seeded
/// shuffled order, each paired with a uniformly drawn item the user has no
/// training interaction with.
pub fn sample_training_triples(split: &SplitDataset, seed: u64) -> Result<Vec<TrainingTriple>> {
    if split.train.is_empty() {
        return Err(Error::Sampling("training split is empty".into()));
    }
    for (user, items) in split.train_by_user.iter().enumerate() {
        if !items.is_empty() && items.len() >= split.n_items {
            return Err(Error::Sampling(format!(
                "user {user} interacted with every item; no negative exists"
            )));
        }
    }
    let mut rng = rng::stream(seed, "triples");
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut rng);
    let triples = order
        .into_iter()
        .map(|k| {
            let it = split.train[k];
            let seen = &split.train_by_user[it.user];
            let neg = loop {
                let cand = rng.random_range(0..split.n_items);
                if seen.binary_search(&cand).is_err() {
                    break cand;
                }
            };
            TrainingTriple {
                user: it.user,
                pos: it.item,
                neg,
            }
        })
        .collect();
    Ok(triples)
}

/// Candidate list: `positives` followed by `n_neg` distinct items drawn
/// uniformly from the catalogue minus `forbidden` (sorted).
pub fn build_candidates<R: Rng>(
    positives: &[usize],
    forbidden: &[usize],
    n_items: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..n_items)
        .filter(|i| forbidden.binary_search(i).is_err())
        .collect();
    if eligible.len() < n_neg {
        return Err(Error::Sampling(format!(
            "requested {n_neg} negatives but only {} eligible items (shortfall {})",
            eligible.len(),
            n_neg - eligible.len()
        )));
    }
    let mut out = positives.to_vec();
    out.extend(index::sample(rng, eligible.len(), n_neg).into_iter().map(|k| eligible[k]));
    Ok(out)
}

/// Test positives of `user` plus `n_neg` items the user never interacted
/// with in any split.
pub fn build_eval_candidates(
    split: &SplitDataset,
    user: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let positives = split
        .test_by_user
        .get(user)
        .ok_or(Error::Index { index: user, rows: split.n_users })?;
    if positives.is_empty() {
        return Err(Error::Sampling(format!("user {user} has no test positives")));
    }
    let forbidden = split.all_items_of(user);
    let mut rng = rng::substream(seed, "eval-candidates", user as u64);
    build_candidates(positives, &forbidden, split.n_items, n_neg, &mut rng)
}
