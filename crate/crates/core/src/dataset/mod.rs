//! Rating-log ingestion and the train/validation/test and support/query splits.
//!
//! Pipeline: [`ingest_csv`] → [`preprocess`] → [`Dataset::build`], which runs
//! [`chronological_split`] and [`support_query_split`] and derives the
//! [`ItemCatalog`] popularity counts from the training split.
//!
//! # Bundle format
//!
//! [`Dataset::save`] writes a single JSON document (UTF-8) with the fields of
//! [`Dataset`]. Floats are written in shortest round-trip form and parsed with
//! exact rounding, so `load(save(d)) == d`.

mod ingest;
pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use ingest::{ingest_csv, ingest_reader, write_csv, ColumnMapping};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// Interactions as read from a log, before binarization and filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLog {
    pub interactions: Vec<Interaction>,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    /// Category index per item.
    pub item_category: Vec<usize>,
    pub category_labels: Vec<String>,
}

/// Positive interactions after binarization, deduplication and filtering, with
/// dense user/item/category indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessed {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub item_category: Vec<usize>,
    pub num_categories: usize,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub category_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub category_of: Vec<usize>,
    /// Training-split positive count per item.
    pub popularity: Vec<u64>,
    pub num_categories: usize,
}

impl ItemCatalog {
    pub fn num_items(&self) -> usize {
        self.category_of.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub catalog: ItemCatalog,
    /// Sorted, deduplicated training positives per user.
    pub train_items: Vec<Vec<usize>>,
    /// Chronological support items per user; empty for users excluded from
    /// meta-training.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub category_labels: Vec<String>,
}

/// Binarizes ratings, keeps the latest positive per (user, item), and filters
/// users and items with fewer than `min_interactions` positives until nothing
/// changes. Indices are re-densified in ascending order of the raw index.
pub fn preprocess(
    raw: &RawLog,
    min_interactions: usize,
    positive_threshold: f64,
) -> Result<Preprocessed> {
    if min_interactions < 1 {
        return Err(Error::InvalidInput("min_interactions must be at least 1".into()));
    }

    // Latest positive per pair; later rows win timestamp ties.
    let mut latest: HashMap<(usize, usize), Interaction> = HashMap::new();
    for it in raw.interactions.iter().filter(|it| it.rating >= positive_threshold) {
        latest
            .entry((it.user, it.item))
            .and_modify(|cur| {
                if it.timestamp >= cur.timestamp {
                    *cur = *it;
                }
            })
            .or_insert(*it);
    }
    let mut kept: Vec<Interaction> = latest.into_values().collect();
    kept.sort_by_key(|it| (it.timestamp, it.user, it.item));

    loop {
        let mut user_count: HashMap<usize, usize> = HashMap::new();
        let mut item_count: HashMap<usize, usize> = HashMap::new();
        for it in &kept {
            *user_count.entry(it.user).or_default() += 1;
            *item_count.entry(it.item).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|it| {
            user_count[&it.user] >= min_interactions && item_count[&it.item] >= min_interactions
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset("filtering"));
    }

    let users = dense_map(kept.iter().map(|it| it.user));
    let items = dense_map(kept.iter().map(|it| it.item));
    let categories = dense_map(items.order.iter().map(|&j| raw.item_category[j]));

    let interactions = kept
        .iter()
        .map(|it| Interaction {
            user: users.index[&it.user],
            item: items.index[&it.item],
            ..*it
        })
        .collect();
    let item_category = items
        .order
        .iter()
        .map(|&j| categories.index[&raw.item_category[j]])
        .collect();

    Ok(Preprocessed {
        interactions,
        num_users: users.order.len(),
        num_items: items.order.len(),
        item_category,
        num_categories: categories.order.len(),
        user_labels: users.order.iter().map(|&u| raw.user_labels[u].clone()).collect(),
        item_labels: items.order.iter().map(|&j| raw.item_labels[j].clone()).collect(),
        category_labels: categories
            .order
            .iter()
            .map(|&c| raw.category_labels[c].clone())
            .collect(),
    })
}

struct DenseMap {
    order: Vec<usize>,
    index: HashMap<usize, usize>,
}

fn dense_map(ids: impl Iterator<Item = usize>) -> DenseMap {
    let mut order: Vec<usize> = ids.collect();
    order.sort_unstable();
    order.dedup();
    let index = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    DenseMap { order, index }
}

/// Global chronological split. Interactions are sorted by
/// `(timestamp, user, item)`; the cut points are the rounded cumulative ratios.
pub fn chronological_split(
    interactions: &[Interaction],
    ratios: SplitRatios,
) -> Result<(Vec<Interaction>, Vec<Interaction>, Vec<Interaction>)> {
    let SplitRatios {
        train,
        validation,
        test,
    } = ratios;
    if [train, validation, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + validation + test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidInput(format!(
            "split ratios must be in [0,1] and sum to 1, got ({train}, {validation}, {test})"
        )));
    }
    if interactions.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 interactions to split, got {}",
            interactions.len()
        )));
    }
    let mut sorted = interactions.to_vec();
    sorted.sort_by_key(|it| (it.timestamp, it.user, it.item));
    let n = sorted.len() as f64;
    let b1 = (n * train).round() as usize;
    let b2 = ((n * (train + validation)).round() as usize).max(b1);
    let test_part = sorted.split_off(b2);
    let val_part = sorted.split_off(b1);
    Ok((sorted, val_part, test_part))
}

/// Per-user support/query split of the training positives. The earliest
/// `ceil(fraction * n)` items go to the support set, the rest to the query set,
/// which always keeps at least one item. Users with fewer than two training
/// positives get two empty sets.
pub fn support_query_split(
    train: &[Interaction],
    num_users: usize,
    support_fraction: f64,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if !(support_fraction > 0.0 && support_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "support fraction must be in (0, 1], got {support_fraction}"
        )));
    }
    let mut per_user: Vec<Vec<&Interaction>> = vec![Vec::new(); num_users];
    for it in train {
        if it.user >= num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: it.user,
                limit: num_users,
            });
        }
        per_user[it.user].push(it);
    }
    let mut support = vec![Vec::new(); num_users];
    let mut query = vec![Vec::new(); num_users];
    let mut excluded = 0usize;
    for (u, mut items) in per_user.into_iter().enumerate() {
        let n = items.len();
        if n < 2 {
            if n == 1 {
                excluded += 1;
            }
            continue;
        }
        items.sort_by_key(|it| (it.timestamp, it.item));
        let mut s = ((n as f64 * support_fraction) - 1e-9).ceil() as usize;
        s = s.clamp(1, n - 1);
        support[u] = items[..s].iter().map(|it| it.item).collect();
        query[u] = items[s..].iter().map(|it| it.item).collect();
    }
    if excluded > 0 {
        warn!("{excluded} user(s) with a single training positive excluded from meta-training");
    }
    Ok((support, query))
}

impl Dataset {
    /// Splits, drops users without any training positive, and derives the
    /// catalog and per-user sets.
    pub fn build(pre: Preprocessed, ratios: SplitRatios, support_fraction: f64) -> Result<Self> {
        let (train, validation, test) = chronological_split(&pre.interactions, ratios)?;

        let mut has_train = vec![false; pre.num_users];
        for it in &train {
            has_train[it.user] = true;
        }
        let dropped = has_train.iter().filter(|&&h| !h).count();
        if dropped > 0 {
            warn!("{dropped} user(s) without training positives dropped");
        }
        let mut remap = vec![usize::MAX; pre.num_users];
        let mut user_labels = Vec::new();
        for (u, _) in has_train.iter().enumerate().filter(|(_, &h)| h) {
            remap[u] = user_labels.len();
            user_labels.push(pre.user_labels[u].clone());
        }
        let relabel = |v: Vec<Interaction>| -> Vec<Interaction> {
            v.into_iter()
                .filter(|it| remap[it.user] != usize::MAX)
                .map(|it| Interaction {
                    user: remap[it.user],
                    ..it
                })
                .collect()
        };
        let train = relabel(train);
        let validation = relabel(validation);
        let test = relabel(test);
        let num_users = user_labels.len();
        if num_users == 0 {
            return Err(Error::EmptyDataset("splitting"));
        }

        let mut popularity = vec![0u64; pre.num_items];
        let mut train_items = vec![Vec::new(); num_users];
        for it in &train {
            popularity[it.item] += 1;
            train_items[it.user].push(it.item);
        }
        for items in &mut train_items {
            items.sort_unstable();
            items.dedup();
        }
        let (support, query) = support_query_split(&train, num_users, support_fraction)?;

        Ok(Self {
            num_users,
            num_items: pre.num_items,
            train,
            validation,
            test,
            catalog: ItemCatalog {
                category_of: pre.item_category,
                popularity,
                num_categories: pre.num_categories,
            },
            train_items,
            support,
            query,
            user_labels,
            item_labels: pre.item_labels,
            category_labels: pre.category_labels,
        })
    }

    pub fn split(&self, split: Split) -> &[Interaction] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Sorted, deduplicated items per user in the given split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for it in self.split(split) {
            out[it.user].push(it.item);
        }
        for v in &mut out {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    /// Users with a non-empty support and query set.
    pub fn meta_users(&self) -> Vec<usize> {
        (0..self.num_users)
            .filter(|&u| !self.support[u].is_empty() && !self.query[u].is_empty())
            .collect()
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train_items[user].binary_search(&item).is_ok()
    }

    /// Uniform item the user has no training interaction with, by rejection
    /// sampling over the item universe.
    pub fn sample_negative<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Result<usize> {
        if user >= self.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: user,
                limit: self.num_users,
            });
        }
        if self.train_items[user].len() >= self.num_items {
            return Err(Error::InvalidInput(format!(
                "user {user} interacted with every item; no negative exists"
            )));
        }
        loop {
            let j = rng.gen_range(0..self.num_items);
            if !self.is_train_positive(user, j) {
                return Ok(j);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn it(user: usize, item: usize, rating: f64, timestamp: i64) -> Interaction {
        Interaction {
            user,
            item,
            rating,
            timestamp,
        }
    }

    fn raw(interactions: Vec<Interaction>, users: usize, items: usize) -> RawLog {
        RawLog {
            interactions,
            user_labels: (0..users).map(|u| format!("u{u}")).collect(),
            item_labels: (0..items).map(|j| format!("i{j}")).collect(),
            item_category: (0..items).map(|j| j % 2).collect(),
            category_labels: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn user_below_threshold_is_removed() {
        // users 0..10 rate items 0..10 with 5.0; user 10 rates only 9 items.
        let mut v = Vec::new();
        for u in 0..10 {
            for j in 0..10 {
                v.push(it(u, j, 5.0, (u * 10 + j) as i64));
            }
        }
        for j in 0..9 {
            v.push(it(10, j, 5.0, 1000 + j as i64));
        }
        let pre = preprocess(&raw(v, 11, 10), 10, 4.0).unwrap();
        assert_eq!(pre.num_users, 10);
        assert_eq!(pre.num_items, 10);
        assert_eq!(pre.interactions.len(), 100);
    }

    #[test]
    fn rating_at_threshold_is_positive() {
        let v = vec![it(0, 0, 4.0, 0), it(0, 1, 3.9, 1)];
        let pre = preprocess(&raw(v, 1, 2), 1, 4.0).unwrap();
        assert_eq!(pre.interactions.len(), 1);
        assert_eq!(pre.item_labels, vec!["i0".to_string()]);
    }

    #[test]
    fn filtering_fixed_point_is_unchanged() {
        let mut v = Vec::new();
        for u in 0..12 {
            for j in 0..11 {
                v.push(it(u, j, 4.5, (u * 11 + j) as i64));
            }
        }
        let r = raw(v.clone(), 12, 11);
        let pre = preprocess(&r, 10, 4.0).unwrap();
        assert_eq!(pre.interactions.len(), v.len());
        assert_eq!((pre.num_users, pre.num_items), (12, 11));
    }

    #[test]
    fn filtering_cascades() {
        // Removing user 2 drops item 2 below the threshold, which drops user 1.
        let v = vec![
            it(0, 0, 5.0, 0),
            it(0, 1, 5.0, 1),
            it(1, 0, 5.0, 2),
            it(1, 2, 5.0, 3),
            it(2, 2, 5.0, 4),
            it(3, 0, 5.0, 5),
            it(3, 1, 5.0, 6),
        ];
        let pre = preprocess(&raw(v, 4, 3), 2, 4.0).unwrap();
        assert_eq!(pre.num_users, 2);
        assert_eq!(pre.num_items, 2);
    }

    #[test]
    fn duplicates_keep_latest() {
        let v = vec![it(0, 0, 5.0, 10), it(0, 0, 4.0, 20), it(0, 1, 5.0, 5)];
        let pre = preprocess(&raw(v, 1, 2), 1, 4.0).unwrap();
        assert_eq!(pre.interactions.len(), 2);
        let kept = pre.interactions.iter().find(|x| x.item == 0).unwrap();
        assert_eq!((kept.rating, kept.timestamp), (4.0, 20));
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let v = vec![it(0, 0, 2.0, 0)];
        assert!(matches!(
            preprocess(&raw(v, 1, 1), 1, 4.0),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let v: Vec<_> = (0..10).map(|t| it(t % 3, t, 5.0, t as i64)).collect();
        let (a, b, c) = chronological_split(&v, SplitRatios::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let v: Vec<_> = (0..100).map(|t| it(t % 7, t, 5.0, (99 - t) as i64)).collect();
        let (a, b, c) = chronological_split(&v, SplitRatios::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert!(a.iter().map(|x| x.timestamp).max() <= b.iter().map(|x| x.timestamp).min());
        assert!(b.iter().map(|x| x.timestamp).max() <= c.iter().map(|x| x.timestamp).min());
    }

    #[test]
    fn split_ties_are_deterministic() {
        let v: Vec<_> = (0..20).map(|t| it(19 - t, t % 4, 5.0, 7)).collect();
        let mut shuffled = v.clone();
        shuffled.reverse();
        let a = chronological_split(&v, SplitRatios::default()).unwrap();
        let b = chronological_split(&shuffled, SplitRatios::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.0.windows(2).all(|w| (w[0].user, w[0].item) <= (w[1].user, w[1].item)));
    }

    #[test]
    fn split_needs_five() {
        let v: Vec<_> = (0..4).map(|t| it(0, t, 5.0, t as i64)).collect();
        assert!(chronological_split(&v, SplitRatios::default()).is_err());
    }

    #[test]
    fn support_query_sizes() {
        for (n, s, q) in [(10usize, 8usize, 2usize), (2, 1, 1), (5, 4, 1)] {
            let v: Vec<_> = (0..n).map(|t| it(0, t, 5.0, (n - t) as i64)).collect();
            let (sup, qry) = support_query_split(&v, 1, 0.8).unwrap();
            assert_eq!((sup[0].len(), qry[0].len()), (s, q), "n = {n}");
            // item t has timestamp n - t
            let ts = |j: &usize| n - j;
            let max_support = sup[0].iter().map(ts).max().unwrap();
            let min_query = qry[0].iter().map(ts).min().unwrap();
            assert!(max_support <= min_query);
        }
    }

    #[test]
    fn single_positive_user_is_excluded() {
        let v = vec![it(0, 0, 5.0, 0), it(1, 0, 5.0, 1), it(1, 1, 5.0, 2)];
        let (sup, qry) = support_query_split(&v, 2, 0.8).unwrap();
        assert!(sup[0].is_empty() && qry[0].is_empty());
        assert_eq!((sup[1].len(), qry[1].len()), (1, 1));
    }

    fn small_dataset() -> Dataset {
        let mut v = Vec::new();
        let mut t = 0;
        for u in 0..4 {
            for j in 0..8 {
                if j != 7 || u == 3 {
                    v.push(it(u, j, 5.0, t));
                    t += 1;
                }
            }
        }
        // Everything in training so user 0 has all items but 7.
        let pre = preprocess(&raw(v, 4, 8), 1, 4.0).unwrap();
        let ratios = SplitRatios {
            train: 1.0,
            validation: 0.0,
            test: 0.0,
        };
        Dataset::build(pre, ratios, 0.8).unwrap()
    }

    #[test]
    fn forced_negative() {
        let d = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(d.sample_negative(0, &mut rng).unwrap(), 7);
        }
        assert!(d.sample_negative(3, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_uniform() {
        // Two eligible negatives (6 and 7) for user 0.
        let mut d = small_dataset();
        d.train_items[0].retain(|&j| j != 6);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let sixes = (0..n)
            .filter(|_| d.sample_negative(0, &mut rng).unwrap() == 6)
            .count();
        let freq = sixes as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.05, "freq {freq}");
        // chi-square with 1 dof, 99.9% quantile 10.83
        let expected = n as f64 / 2.0;
        let chi = 2.0 * (sixes as f64 - expected).powi(2) / expected;
        assert!(chi < 10.83, "chi2 {chi}");
    }

    #[test]
    fn seeded_negatives_repeat() {
        let d = small_dataset();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| d.sample_negative(1, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn popularity_sums_to_training_positives() {
        let d = small_dataset();
        assert_eq!(
            d.catalog.popularity.iter().sum::<u64>() as usize,
            d.train.len()
        );
    }
}
