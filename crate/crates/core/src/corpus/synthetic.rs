//! Seeded synthetic corpora with Zipf-distributed item popularity.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use super::{build_dataset, Dataset, Interaction, InteractionLog};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Exponent `s` of the rank-popularity law `w_k ∝ (k+1)^-s`.
    pub zipf_exponent: f64,
    /// Expected number of distinct items per user (Poisson).
    pub mean_interactions: f64,
    /// Number of item categories; 0 leaves categories unassigned.
    pub n_categories: usize,
    /// Favorite categories drawn per user.
    pub taste_categories: usize,
    /// Probability that a draw comes from the user's favorite categories.
    pub taste_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 2000,
            n_items: 500,
            zipf_exponent: 1.2,
            mean_interactions: 40.0,
            n_categories: 0,
            taste_categories: 2,
            taste_share: 0.0,
            seed: 2021,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub log: InteractionLog,
    /// `(item id, category name)` records, empty when no categories were requested.
    pub categories: Vec<(String, String)>,
}

impl SyntheticCorpus {
    pub fn into_dataset(&self, holdout_ratio: f64, seed: u64) -> Result<Dataset> {
        let mut ds = build_dataset(&self.log, 1, holdout_ratio, seed)?;
        if !self.categories.is_empty() {
            ds.assign_categories(self.categories.iter().map(|(a, b)| (a, b)));
        }
        Ok(ds)
    }
}

pub fn synthetic_corpus(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.n_users == 0 || config.n_items < 2 {
        return Err(Error::InvalidArgument("need at least 1 user and 2 items".into()));
    }
    if !(config.mean_interactions > 0.0) || !(0.0..=1.0).contains(&config.taste_share) {
        return Err(Error::InvalidArgument("mean_interactions must be positive and taste_share in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights: Vec<f64> = (0..config.n_items).map(|k| ((k + 1) as f64).powf(-config.zipf_exponent)).collect();
    let global = WeightedIndex::new(&weights).expect("positive weights");

    let item_category: Vec<usize> = (0..config.n_items)
        .map(|_| if config.n_categories > 0 { rng.random_range(0..config.n_categories) } else { 0 })
        .collect();
    let per_category: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>> = (0..config.n_categories)
        .map(|c| {
            let members: Vec<usize> = (0..config.n_items).filter(|&k| item_category[k] == c).collect();
            let w: Vec<f64> = members.iter().map(|&k| weights[k]).collect();
            WeightedIndex::new(&w).ok().map(|idx| (members, idx))
        })
        .collect();

    let poisson =
        Poisson::new(config.mean_interactions).map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?;
    let cap = config.n_items - 1;
    let mut records = Vec::new();
    let mut clock = 0i64;
    let mut taken = vec![false; config.n_items];
    for u in 0..config.n_users {
        let count = (poisson.sample(&mut rng) as usize).clamp(1, cap);
        let favorites: Vec<usize> = if config.n_categories > 0 && config.taste_share > 0.0 {
            (0..config.taste_categories).map(|_| rng.random_range(0..config.n_categories)).collect()
        } else {
            Vec::new()
        };
        let mut chosen = Vec::with_capacity(count);
        let mut attempts = 0;
        while chosen.len() < count && attempts < 50 * count {
            attempts += 1;
            let from_taste = !favorites.is_empty() && rng.random::<f64>() < config.taste_share;
            let item = if from_taste {
                let c = favorites[rng.random_range(0..favorites.len())];
                match &per_category[c] {
                    Some((members, idx)) => members[idx.sample(&mut rng)],
                    None => global.sample(&mut rng),
                }
            } else {
                global.sample(&mut rng)
            };
            if !taken[item] {
                taken[item] = true;
                chosen.push(item);
            }
        }
        for &item in &chosen {
            taken[item] = false;
            clock += 1;
            records.push(Interaction { user: format!("u{u}"), item: format!("i{item}"), timestamp: clock });
        }
    }

    let categories = if config.n_categories > 0 {
        (0..config.n_items).map(|k| (format!("i{k}"), format!("c{}", item_category[k]))).collect()
    } else {
        Vec::new()
    };
    Ok(SyntheticCorpus { log: InteractionLog { records }, categories })
}
