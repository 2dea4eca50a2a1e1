//! Synthetic rating logs for desk-scale experiments.
//!
//! Items get a category uniformly at random and a power-law base popularity
//! `rank^-exponent`. Each user belongs to a population which fixes how many
//! favourite categories they draw from, how strongly they follow popularity
//! (`weight^bias` inside a category; negative bias prefers the long tail), and
//! how active they are. Timestamps are uniform over the time span, so a global
//! chronological split leaves most users with items in every split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{Interaction, RawLog};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub name: String,
    /// Relative share of users.
    pub share: f64,
    /// Inclusive range of favourite categories per user.
    pub categories: (usize, usize),
    pub popularity_bias: f64,
    /// Inclusive range of interactions per user.
    pub activity: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub popularity_exponent: f64,
    pub populations: Vec<Population>,
    /// Fraction of interactions rated 1–3.
    pub low_rating_rate: f64,
    pub time_span: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SyntheticConfig {
    /// 500 users, 1000 items, 20 categories, one mixed population.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_users: 500,
            num_items: 1000,
            num_categories: 20,
            popularity_exponent: 0.8,
            populations: vec![Population {
                name: "mixed".into(),
                share: 1.0,
                categories: (1, 6),
                popularity_bias: 1.0,
                activity: (20, 60),
            }],
            low_rating_rate: 0.1,
            time_span: 1_000_000,
            seed,
        }
    }

    /// Three planted populations: accuracy-leaning (few categories, mainstream),
    /// diversity-leaning (many categories) and fairness-leaning (long-tail).
    pub fn planted(seed: u64) -> Self {
        Self {
            populations: vec![
                Population {
                    name: "accuracy".into(),
                    share: 1.0,
                    categories: (1, 2),
                    popularity_bias: 1.5,
                    activity: (40, 70),
                },
                Population {
                    name: "diversity".into(),
                    share: 1.0,
                    categories: (10, 16),
                    popularity_bias: 1.0,
                    activity: (20, 40),
                },
                Population {
                    name: "fairness".into(),
                    share: 1.0,
                    categories: (2, 4),
                    popularity_bias: -0.5,
                    activity: (15, 30),
                },
            ],
            ..Self::desk(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub raw: RawLog,
    /// Population index per raw user.
    pub population_of: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.num_categories == 0 {
        return Err(Error::InvalidInput("synthetic sizes must be positive".into()));
    }
    if cfg.populations.is_empty() || cfg.populations.iter().any(|p| p.share <= 0.0) {
        return Err(Error::InvalidInput("need populations with positive share".into()));
    }
    for p in &cfg.populations {
        if p.categories.0 == 0 || p.categories.0 > p.categories.1 || p.activity.0 > p.activity.1 {
            return Err(Error::InvalidInput(format!("bad ranges in population {}", p.name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let item_category: Vec<usize> = (0..cfg.num_items)
        .map(|j| {
            // every category gets at least one item when possible
            if j < cfg.num_categories {
                j
            } else {
                rng.gen_range(0..cfg.num_categories)
            }
        })
        .collect();
    let mut ranks: Vec<usize> = (1..=cfg.num_items).collect();
    ranks.shuffle(&mut rng);
    let base: Vec<f64> = ranks
        .iter()
        .map(|&r| (r as f64).powf(-cfg.popularity_exponent))
        .collect();
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_categories];
    for (j, &c) in item_category.iter().enumerate() {
        by_category[c].push(j);
    }
    let non_empty: Vec<usize> = (0..cfg.num_categories)
        .filter(|&c| !by_category[c].is_empty())
        .collect();

    // per population, per category sampler
    let samplers: Vec<Vec<Option<WeightedIndex<f64>>>> = cfg
        .populations
        .iter()
        .map(|p| {
            by_category
                .iter()
                .map(|items| {
                    if items.is_empty() {
                        None
                    } else {
                        let w: Vec<f64> = items.iter().map(|&j| base[j].powf(p.popularity_bias)).collect();
                        WeightedIndex::new(w).ok()
                    }
                })
                .collect()
        })
        .collect();
    let shares = WeightedIndex::new(cfg.populations.iter().map(|p| p.share))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut interactions = Vec::new();
    let mut population_of = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        // round-robin keeps population sizes balanced; the share sampler is
        // used only when shares are unequal
        let pi = if cfg.populations.iter().all(|p| p.share == cfg.populations[0].share) {
            u % cfg.populations.len()
        } else {
            shares.sample(&mut rng)
        };
        population_of.push(pi);
        let pop = &cfg.populations[pi];
        let n_fav = rng
            .gen_range(pop.categories.0..=pop.categories.1)
            .min(non_empty.len());
        let favourites: Vec<usize> = non_empty.choose_multiple(&mut rng, n_fav).copied().collect();
        let n = rng.gen_range(pop.activity.0..=pop.activity.1);
        let mut seen = Vec::with_capacity(n);
        for _ in 0..n {
            let mut item = None;
            for _attempt in 0..20 {
                let c = *favourites.choose(&mut rng).expect("non-empty favourites");
                let Some(sampler) = &samplers[pi][c] else { continue };
                let j = by_category[c][sampler.sample(&mut rng)];
                if !seen.contains(&j) {
                    item = Some(j);
                    break;
                }
            }
            let Some(j) = item else { continue };
            seen.push(j);
            let rating = if rng.gen::<f64>() < cfg.low_rating_rate {
                rng.gen_range(1..=3) as f64
            } else {
                rng.gen_range(4..=5) as f64
            };
            interactions.push(Interaction {
                user: u,
                item: j,
                rating,
                timestamp: rng.gen_range(0..cfg.time_span.max(1)),
            });
        }
    }

    Ok(SyntheticData {
        raw: RawLog {
            interactions,
            user_labels: (0..cfg.num_users).map(|u| format!("u{u}")).collect(),
            item_labels: (0..cfg.num_items).map(|j| format!("i{j}")).collect(),
            item_category,
            category_labels: (0..cfg.num_categories).map(|c| format!("c{c}")).collect(),
        },
        population_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SyntheticConfig::desk(3);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw.user_labels.len(), 500);
        assert_eq!(a.raw.item_category.len(), 1000);
        assert!(a.raw.interactions.len() > 500 * 15);
        assert!(a.raw.interactions.iter().all(|it| (1.0..=5.0).contains(&it.rating)));
    }

    #[test]
    fn popularity_is_skewed() {
        let data = generate(&SyntheticConfig::desk(1)).unwrap();
        let mut counts = vec![0usize; 1000];
        for it in &data.raw.interactions {
            counts[it.item] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts[..100].iter().sum();
        let total: usize = counts.iter().sum();
        assert!(top as f64 > 0.2 * total as f64, "top-10% share {top}/{total}");
    }

    #[test]
    fn planted_populations_differ() {
        let data = generate(&SyntheticConfig::planted(5)).unwrap();
        let mut cats = vec![Vec::new(); 3];
        for u in 0..data.population_of.len() {
            let mut cs: Vec<usize> = data
                .raw
                .interactions
                .iter()
                .filter(|it| it.user == u)
                .map(|it| data.raw.item_category[it.item])
                .collect();
            cs.sort_unstable();
            cs.dedup();
            cats[data.population_of[u]].push(cs.len() as f64);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&cats[1]) > 2.0 * mean(&cats[0]));
    }
}
