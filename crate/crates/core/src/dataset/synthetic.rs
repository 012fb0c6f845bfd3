//! Synthetic interaction logs whose item content carries a tunable amount of
//! preference signal.
//!
//! Users and items get standard-normal latent vectors. Each latent vector is
//! extended with a popularity coordinate (users: constant 1, items:
//! `N(popularity_mean, popularity_spread²)`), so interaction weights `σ(uᵀv)` also vary in
//! item popularity and the split produces a population of cold items. A
//! negative `popularity_mean` keeps the logistic out of saturation so that
//! only well-aligned items are likely, which sharpens the preference ranking. A user
//! draws `interactions_per_user` distinct items without replacement with
//! those weights. Item features are `(1 - noise)·P v + noise·z` with a fixed
//! Gaussian projection `P` (512 × latent) and white noise `z`. Annotation
//! elements are the ids of the `elements_per_item` random cluster centroids
//! with the largest inner product with the item latent.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    write_content, write_interactions, ContentTable, Dataset, IdMap, Interaction, InteractionLog,
    ItemContent, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::layers::sigmoid;
use crate::linalg::dot;
use crate::rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_elements: usize,
    pub elements_per_item: usize,
    pub interactions_per_user: usize,
    pub content_noise: f64,
    pub popularity_spread: f64,
    #[serde(default)]
    pub popularity_mean: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            latent_dim: 16,
            n_elements: 64,
            elements_per_item: 3,
            interactions_per_user: 20,
            content_noise: 0.2,
            popularity_spread: 1.5,
            popularity_mean: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return fail("n_users, n_items and latent_dim must be positive".into());
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.n_items {
            return fail(format!(
                "interactions_per_user must be in 1..={} (n_items), got {}",
                self.n_items, self.interactions_per_user
            ));
        }
        if !(0.0..=1.0).contains(&self.content_noise) {
            return fail(format!("content_noise must be in [0, 1], got {}", self.content_noise));
        }
        if self.n_elements == 0 || self.elements_per_item > self.n_elements {
            return fail(format!(
                "elements_per_item ({}) must not exceed n_elements ({})",
                self.elements_per_item, self.n_elements
            ));
        }
        if !(self.popularity_spread >= 0.0) {
            return fail("popularity_spread must be >= 0".into());
        }
        if !self.popularity_mean.is_finite() {
            return fail("popularity_mean must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    /// `(user, item, timestamp)` with external id = generator index.
    pub interactions: Vec<(i64, i64, i64)>,
    pub features: Vec<Vec<f64>>,
    pub elements: Vec<Vec<usize>>,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    /// Row-major `FEATURE_DIM × latent_dim`.
    pub projection: Vec<f64>,
}

fn normal_rows<R: rand::Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let l = config.latent_dim;
    let user_latent = normal_rows(config.n_users, l, &mut rng::stream(seed, "synthetic.users"));
    let item_latent = normal_rows(config.n_items, l, &mut rng::stream(seed, "synthetic.items"));
    let popularity: Vec<f64> = {
        let mut r = rng::stream(seed, "synthetic.popularity");
        let dist = Normal::new(config.popularity_mean, config.popularity_spread.max(f64::MIN_POSITIVE)).expect("std");
        (0..config.n_items)
            .map(|_| if config.popularity_spread > 0.0 { dist.sample(&mut r) } else { config.popularity_mean })
            .collect()
    };

    let mut interactions = Vec::with_capacity(config.n_users * config.interactions_per_user);
    let mut pick_rng = rng::stream(seed, "synthetic.interactions");
    for (u, pu) in user_latent.iter().enumerate() {
        let weights: Vec<f64> = item_latent
            .iter()
            .zip(&popularity)
            .map(|(qi, b)| sigmoid(dot(pu, qi) + b).max(1e-12))
            .collect();
        let chosen = index::sample_weighted(
            &mut pick_rng,
            config.n_items,
            |i| weights[i],
            config.interactions_per_user,
        )
        .map_err(|e| Error::Sampling(format!("weighted draw for user {u}: {e}")))?;
        let mut stamps: Vec<i64> = (0..config.interactions_per_user as i64).collect();
        stamps.shuffle(&mut pick_rng);
        for (item, ts) in chosen.into_iter().zip(stamps) {
            interactions.push((u as i64, item as i64, ts));
        }
    }

    let mut proj_rng = rng::stream(seed, "synthetic.projection");
    let scale = 1.0 / (l as f64).sqrt();
    let projection: Vec<f64> = (0..FEATURE_DIM * l)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut proj_rng);
            scale * z
        })
        .collect();
    let mut noise_rng = rng::stream(seed, "synthetic.noise");
    let features = item_latent
        .iter()
        .map(|v| {
            (0..FEATURE_DIM)
                .map(|k| {
                    let signal = dot(&projection[k * l..(k + 1) * l], v);
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    (1.0 - config.content_noise) * signal + config.content_noise * z
                })
                .collect()
        })
        .collect();

    let centroids = normal_rows(config.n_elements, l, &mut rng::stream(seed, "synthetic.centroids"));
    let elements = item_latent
        .iter()
        .map(|v| {
            let mut scored: Vec<(f64, usize)> =
                centroids.iter().enumerate().map(|(k, c)| (dot(c, v), k)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut top: Vec<usize> =
                scored.iter().take(config.elements_per_item).map(|s| s.1).collect();
            top.sort_unstable();
            top
        })
        .collect();

    Ok(SyntheticData {
        config: config.clone(),
        interactions,
        features,
        elements,
        user_latent,
        item_latent,
        projection,
    })
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_interactions(&dir.join(Dataset::INTERACTIONS), &self.interactions)?;
        let rows: Vec<(i64, &[f64], &[usize])> = (0..self.config.n_items)
            .map(|i| (i as i64, self.features[i].as_slice(), self.elements[i].as_slice()))
            .collect();
        write_content(&dir.join(Dataset::CONTENT), &rows)
    }

    /// The dataset `Dataset::load_dir` would produce from the written files.
    pub fn to_dataset(&self) -> Dataset {
        let users: BTreeSet<i64> = self.interactions.iter().map(|r| r.0).collect();
        let items: BTreeSet<i64> = self.interactions.iter().map(|r| r.1).collect();
        let mut ids = IdMap::from_external(users, items);
        for i in 0..self.config.n_items as i64 {
            if ids.item(i).is_none() {
                ids.push_item(i);
            }
        }
        let interactions = self
            .interactions
            .iter()
            .map(|&(u, i, ts)| Interaction {
                user: ids.user(u).expect("user"),
                item: ids.item(i).expect("item"),
                timestamp: ts,
            })
            .collect();
        let mut content = vec![ItemContent::default(); self.config.n_items];
        let mut vocab_size = 1;
        for i in 0..self.config.n_items {
            if let Some(&m) = self.elements[i].last() {
                vocab_size = vocab_size.max(m + 1);
            }
            content[ids.item(i as i64).expect("item")] = ItemContent {
                feature: Some(self.features[i].clone()),
                image: None,
                elements: self.elements[i].clone(),
            };
        }
        Dataset {
            log: InteractionLog {
                interactions,
                n_users: ids.users.len(),
                n_items: ids.items.len(),
            },
            ids,
            content: ContentTable {
                items: content,
                vocab_size,
            },
        }
    }
}

/// Mean absolute Pearson correlation between each item's feature and the
/// noiseless projection of its latent vector.
pub fn feature_latent_correlation(data: &SyntheticData) -> f64 {
    let l = data.config.latent_dim;
    let total: f64 = data
        .item_latent
        .iter()
        .zip(&data.features)
        .map(|(v, f)| {
            let signal: Vec<f64> = (0..FEATURE_DIM)
                .map(|k| dot(&data.projection[k * l..(k + 1) * l], v))
                .collect();
            pearson(&signal, f).abs()
        })
        .sum();
    total / data.item_latent.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_shape() {
        let cfg = SyntheticConfig::default();
        let data = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(data.interactions.len(), 4000);
        assert_eq!(data.features.len(), 300);
        assert!(data.features.iter().all(|f| f.len() == FEATURE_DIM));
        assert!(data.elements.iter().all(|e| e.len() == 3));
        let ds = data.to_dataset();
        assert_eq!(ds.log.n_items, 300);
        assert_eq!(ds.log.n_users, 200);
    }

    #[test]
    fn full_noise_decorrelates_features() {
        let cfg = SyntheticConfig {
            content_noise: 1.0,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg, 7).unwrap();
        assert!(feature_latent_correlation(&data) < 0.1);
        let clean = generate_synthetic(&SyntheticConfig::default(), 7).unwrap();
        assert!(feature_latent_correlation(&clean) > 0.9);
    }

    #[test]
    fn too_many_interactions_per_user() {
        let cfg = SyntheticConfig {
            interactions_per_user: 999,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn written_files_are_byte_identical_and_load_back() {
        let cfg = SyntheticConfig {
            n_users: 20,
            n_items: 40,
            interactions_per_user: 5,
            ..SyntheticConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&cfg, 9).unwrap();
        data.write(a.path()).unwrap();
        generate_synthetic(&cfg, 9).unwrap().write(b.path()).unwrap();
        for name in [Dataset::INTERACTIONS, Dataset::CONTENT] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        let loaded = Dataset::load_dir(a.path()).unwrap();
        let mem = data.to_dataset();
        assert_eq!(loaded.log, mem.log);
        assert_eq!(loaded.ids, mem.ids);
        assert_eq!(loaded.content, mem.content);
    }
}
