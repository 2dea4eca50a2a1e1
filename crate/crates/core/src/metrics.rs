//! Top-K lists, ranking/diversity/popularity metrics and their scalarizations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ItemCatalog, Split};
use crate::encoder::Embeddings;
use crate::{par, sigmoid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RecommendationList {
    /// The first `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.items.len());
        Self {
            user: self.user,
            items: self.items[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
        }
    }
}

fn by_score_then_id(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` highest-scoring items not matched by `excluded`, ties broken by
/// ascending item id. Shorter when fewer candidates remain.
pub fn top_k(
    emb: &dyn Embeddings,
    user: usize,
    k: usize,
    excluded: impl Fn(usize) -> bool,
) -> Result<RecommendationList> {
    if user >= emb.num_users() {
        return Err(Error::OutOfRange {
            what: "user",
            index: user,
            limit: emb.num_users(),
        });
    }
    let u = emb.user(user);
    let mut scored: Vec<(f64, usize)> = (0..emb.num_items())
        .filter(|&j| !excluded(j))
        .map(|j| (crate::dot(u, emb.item(j)), j))
        .collect();
    if scored.len() < k {
        log::warn!("user {user}: only {} candidates for top-{k}", scored.len());
    }
    if k == 0 {
        scored.clear();
    } else if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_score_then_id);
        scored.truncate(k);
    }
    scored.sort_by(by_score_then_id);
    Ok(RecommendationList {
        user,
        items: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    })
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG of one list against a sorted truth set; `None` for empty truth.
pub fn ndcg_user(items: &[usize], truth: &[usize], k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let dcg: f64 = items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, j)| truth.binary_search(j).is_ok())
        .map(|(r, _)| discount(r + 1))
        .sum();
    let idcg: f64 = (1..=k.min(truth.len())).map(discount).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Mean NDCG@K over users whose truth set is non-empty. `truth` is indexed by
/// user id and each entry must be sorted.
pub fn ndcg_at_k(lists: &[RecommendationList], truth: &[Vec<usize>], k: usize) -> f64 {
    let vals: Vec<f64> = lists
        .iter()
        .filter_map(|l| ndcg_user(&l.items, truth.get(l.user).map_or(&[][..], |t| t), k))
        .collect();
    mean(&vals)
}

/// Mean pairwise Euclidean distance among the list's item vectors.
pub fn ild_user(items: &[usize], emb: &dyn Embeddings) -> f64 {
    let n = items.len();
    if n < 2 {
        log::warn!("ILD of a list with {n} item(s) is taken as 0");
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let va = emb.item(items[a]);
            let vb = emb.item(items[b]);
            let d2: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.sqrt();
        }
    }
    // each unordered pair stands for two ordered ones
    2.0 * total / (n * (n - 1)) as f64
}

pub fn ild_at_k(lists: &[RecommendationList], emb: &dyn Embeddings) -> f64 {
    let vals: Vec<f64> = lists.iter().map(|l| ild_user(&l.items, emb)).collect();
    mean(&vals)
}

pub fn arp_user(items: &[usize], catalog: &ItemCatalog) -> f64 {
    let vals: Vec<f64> = items.iter().map(|&j| catalog.popularity[j] as f64).collect();
    mean(&vals)
}

pub fn arp_at_k(lists: &[RecommendationList], catalog: &ItemCatalog) -> f64 {
    let vals: Vec<f64> = lists.iter().map(|l| arp_user(&l.items, catalog)).collect();
    mean(&vals)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarMode {
    #[default]
    RescaledSum,
    HarmonicMean,
}

fn inverse_popularity_term(arp: f64) -> f64 {
    if arp == 0.0 {
        1.0
    } else {
        sigmoid(1.0 / arp)
    }
}

pub fn scalarize(ndcg: f64, ild: f64, arp: f64, mode: ScalarMode) -> Result<f64> {
    if !(ndcg >= 0.0 && ild >= 0.0 && arp >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "metrics must be non-negative (ndcg {ndcg}, ild {ild}, arp {arp})"
        )));
    }
    let div = sigmoid(ild);
    let fair = inverse_popularity_term(arp);
    Ok(match mode {
        ScalarMode::RescaledSum => ndcg + div + fair,
        ScalarMode::HarmonicMean => {
            if ndcg == 0.0 {
                0.0
            } else {
                3.0 / (1.0 / ndcg + 1.0 / div + 1.0 / fair)
            }
        }
    })
}

/// Thresholds of the soft constraints; `tau_fair = None` means no ARP cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub tau_acc: f64,
    pub tau_div: f64,
    pub tau_fair: Option<f64>,
    pub kappa: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            tau_acc: 0.0,
            tau_div: 0.0,
            tau_fair: None,
            kappa: 0.0,
        }
    }
}

pub fn constraint_penalty(ndcg: f64, ild: f64, arp: f64, c: &Constraints) -> f64 {
    if c.kappa == 0.0 {
        return 0.0;
    }
    let fair = c.tau_fair.map_or(0.0, |t| (arp - t).max(0.0));
    c.kappa * ((c.tau_acc - ndcg).max(0.0) + (c.tau_div - ild).max(0.0) + fair)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub ndcg: f64,
    pub ild: f64,
    pub arp: f64,
    pub res_sum: f64,
    pub har_mean: f64,
    pub constraint_penalty: f64,
    /// Users that entered the means.
    pub users: usize,
}

impl MetricReport {
    pub fn from_metrics(k: usize, ndcg: f64, ild: f64, arp: f64, users: usize, c: &Constraints) -> Result<Self> {
        Ok(Self {
            k,
            ndcg,
            ild,
            arp,
            res_sum: scalarize(ndcg, ild, arp, ScalarMode::RescaledSum)?,
            har_mean: scalarize(ndcg, ild, arp, ScalarMode::HarmonicMean)?,
            constraint_penalty: constraint_penalty(ndcg, ild, arp, c),
            users,
        })
    }

    /// The optimizer's score: the chosen scalarization minus the penalty.
    pub fn xi(&self, mode: ScalarMode) -> f64 {
        let g = match mode {
            ScalarMode::RescaledSum => self.res_sum,
            ScalarMode::HarmonicMean => self.har_mean,
        };
        g - self.constraint_penalty
    }
}

/// Metrics on one split at several cut-offs. Lists are built once at the
/// largest K; a top-K list is a prefix of any longer one under the fixed
/// tie-break. Training positives are always excluded, and validation
/// positives too when scoring the test split. Users without positives in
/// the split, or outside `users` when given, are skipped.
pub fn evaluate(
    emb: &dyn Embeddings,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    users: Option<&[usize]>,
    constraints: &Constraints,
) -> Result<Vec<MetricReport>> {
    let Some(&max_k) = ks.iter().max() else {
        return Ok(Vec::new());
    };
    let truth = dataset.items_by_user(split);
    let validation = if split == Split::Test {
        dataset.items_by_user(Split::Validation)
    } else {
        vec![Vec::new(); dataset.num_users]
    };
    let candidates: Vec<usize> = match users {
        Some(us) => us.to_vec(),
        None => (0..dataset.num_users).collect(),
    };
    let evaluated: Vec<usize> = candidates
        .into_iter()
        .filter(|&u| truth.get(u).is_some_and(|t| !t.is_empty()))
        .collect();

    let lists = par::map(&evaluated, |&u| {
        top_k(emb, u, max_k, |j| {
            dataset.is_train_positive(u, j) || validation[u].binary_search(&j).is_ok()
        })
    });
    let lists: Vec<RecommendationList> = lists.into_iter().collect::<Result<_>>()?;

    ks.iter()
        .map(|&k| {
            let cut: Vec<RecommendationList> = lists.iter().map(|l| l.truncated(k)).collect();
            let per_user = par::map(&cut, |l| {
                (
                    ndcg_user(&l.items, &truth[l.user], k).unwrap_or(0.0),
                    ild_user(&l.items, emb),
                    arp_user(&l.items, &dataset.catalog),
                )
            });
            let n = per_user.len();
            let (mut s_n, mut s_i, mut s_a) = (0.0, 0.0, 0.0);
            for (a, b, c) in &per_user {
                s_n += a;
                s_i += b;
                s_a += c;
            }
            let denom = n.max(1) as f64;
            MetricReport::from_metrics(k, s_n / denom, s_i / denom, s_a / denom, n, constraints)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelParams;
    use proptest::prelude::*;

    fn params(users: &[&[f64]], items: &[&[f64]]) -> ModelParams {
        let dim = items[0].len();
        ModelParams {
            dim,
            num_users: users.len(),
            num_items: items.len(),
            users: users.concat(),
            items: items.concat(),
        }
    }

    fn list(user: usize, items: &[usize]) -> RecommendationList {
        RecommendationList {
            user,
            items: items.to_vec(),
            scores: vec![0.0; items.len()],
        }
    }

    #[test]
    fn top_k_orders_by_score() {
        let p = params(&[&[1.0]], &[&[0.1], &[0.9], &[0.5]]);
        let l = top_k(&p, 0, 2, |_| false).unwrap();
        assert_eq!(l.items, vec![1, 2]);
        assert!(l.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn top_k_ties_and_exclusions() {
        let p = params(&[&[1.0]], &[&[1.0], &[1.0], &[1.0], &[1.0]]);
        assert_eq!(top_k(&p, 0, 3, |_| false).unwrap().items, vec![0, 1, 2]);
        let p = params(&[&[1.0]], &[&[0.1], &[0.9], &[0.5]]);
        assert_eq!(top_k(&p, 0, 2, |j| j == 1).unwrap().items, vec![2, 0]);
        assert_eq!(top_k(&p, 0, 5, |j| j == 1).unwrap().items.len(), 2);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_user(&[7], &[7], 1), Some(1.0));
        let v = ndcg_user(&[3, 7], &[7], 2).unwrap();
        assert!((v - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_user(&[1, 2], &[7], 2), Some(0.0));
        assert_eq!(ndcg_user(&[1, 2], &[], 2), None);
    }

    #[test]
    fn ndcg_mean_skips_empty_truth() {
        let truth = vec![vec![1], vec![]];
        let v = ndcg_at_k(&[list(0, &[1, 2]), list(1, &[1, 2])], &truth, 2);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ild_cases() {
        let p = params(&[&[0.0, 0.0]], &[&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(ild_user(&[0, 2], &p), 0.0);
        assert!((ild_user(&[0, 1], &p) - 5.0).abs() < 1e-12);
        assert_eq!(ild_user(&[1], &p), 0.0);
        let a = ild_user(&[0, 1, 2], &p);
        let b = ild_user(&[2, 0, 1], &p);
        assert_eq!(a, b);
    }

    #[test]
    fn arp_cases() {
        let cat = ItemCatalog {
            category_of: vec![0; 3],
            popularity: vec![3, 5, 0],
            num_categories: 1,
        };
        assert_eq!(arp_user(&[0, 1], &cat), 4.0);
        assert_eq!(arp_user(&[2], &cat), 0.0);
        let one = arp_at_k(&[list(0, &[0, 1]), list(1, &[2, 2])], &cat);
        let two = arp_at_k(
            &[list(0, &[0, 1]), list(1, &[2, 2]), list(0, &[0, 1]), list(1, &[2, 2])],
            &cat,
        );
        assert_eq!(one, two);
    }

    #[test]
    fn scalarize_cases() {
        let v = scalarize(0.0, 0.0, 1e9, ScalarMode::RescaledSum).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let v = scalarize(0.5, 1.0, 2.0, ScalarMode::RescaledSum).unwrap();
        assert!((v - 1.853_52).abs() < 1e-5);
        assert_eq!(scalarize(0.0, 1.0, 2.0, ScalarMode::HarmonicMean).unwrap(), 0.0);
        assert_eq!(scalarize(0.5, 1.0, 0.0, ScalarMode::RescaledSum).unwrap(), 0.5 + sigmoid(1.0) + 1.0);
        assert!(scalarize(-0.1, 1.0, 2.0, ScalarMode::RescaledSum).is_err());
        assert!(scalarize(0.1, 1.0, f64::NAN, ScalarMode::RescaledSum).is_err());
    }

    #[test]
    fn penalty_cases() {
        let strict = Constraints {
            tau_acc: 0.5,
            tau_div: 10.0,
            tau_fair: Some(1.0),
            kappa: 0.0,
        };
        assert_eq!(constraint_penalty(0.0, 0.0, 100.0, &strict), 0.0);
        let c = Constraints {
            tau_acc: 0.3,
            tau_div: 1.0,
            tau_fair: Some(10.0),
            kappa: 1.0,
        };
        assert_eq!(constraint_penalty(0.5, 2.0, 5.0, &c), 0.0);
        assert!((constraint_penalty(0.2, 2.0, 5.0, &c) - 0.1).abs() < 1e-12);
    }

    fn dcg_oracle(items: &[usize], truth: &[usize], k: usize) -> f64 {
        // gains summed in natural-log form, then converted
        let mut dcg = 0.0;
        for (i, j) in items.iter().take(k).enumerate() {
            if truth.contains(j) {
                dcg += std::f64::consts::LN_2 / ((i + 2) as f64).ln();
            }
        }
        let mut idcg = 0.0;
        for i in 0..k.min(truth.len()) {
            idcg += std::f64::consts::LN_2 / ((i + 2) as f64).ln();
        }
        dcg / idcg
    }

    proptest! {
        #[test]
        fn ndcg_matches_oracle_and_bounds(
            perm in proptest::sample::subsequence((0..30usize).collect::<Vec<_>>(), 1..15).prop_shuffle(),
            truth in proptest::sample::subsequence((0..30usize).collect::<Vec<_>>(), 1..10),
            k in 1usize..15,
        ) {
            let v = ndcg_user(&perm, &truth, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            prop_assert!((v - dcg_oracle(&perm, &truth, k)).abs() < 1e-12);
            // truths packed at the top reach 1
            let mut best: Vec<usize> = truth.clone();
            best.extend((100..120).collect::<Vec<_>>());
            prop_assert!((ndcg_user(&best, &truth, k).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ild_scales_linearly(
            rows in proptest::collection::vec(proptest::array::uniform3(-2.0f64..2.0), 2..8),
            c in 0.1f64..5.0,
        ) {
            let items: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
            let p = params(&[&[0.0, 0.0, 0.0]], &items);
            let scaled: Vec<[f64; 3]> = rows.iter().map(|r| [r[0] * c, r[1] * c, r[2] * c]).collect();
            let sitems: Vec<&[f64]> = scaled.iter().map(|r| &r[..]).collect();
            let q = params(&[&[0.0, 0.0, 0.0]], &sitems);
            let ids: Vec<usize> = (0..rows.len()).collect();
            let a = ild_user(&ids, &p);
            let b = ild_user(&ids, &q);
            prop_assert!((b - c * a).abs() < 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn scalarizations_are_monotone(
            ndcg in 0.01f64..0.9,
            ild in 0.0f64..5.0,
            arp in 0.1f64..50.0,
            h in 1e-3f64..0.05,
        ) {
            for mode in [ScalarMode::RescaledSum, ScalarMode::HarmonicMean] {
                let base = scalarize(ndcg, ild, arp, mode).unwrap();
                prop_assert!(scalarize(ndcg + h, ild, arp, mode).unwrap() > base);
                prop_assert!(scalarize(ndcg, ild + h, arp, mode).unwrap() > base);
                prop_assert!(scalarize(ndcg, ild, arp + h, mode).unwrap() < base);
            }
        }

        #[test]
        fn penalty_nonnegative_and_zero_iff_satisfied(
            ndcg in 0.0f64..1.0, ild in 0.0f64..3.0, arp in 0.0f64..20.0,
            ta in 0.0f64..1.0, td in 0.0f64..3.0, tf in 0.0f64..20.0,
            kappa in 0.0f64..3.0,
        ) {
            let c = Constraints { tau_acc: ta, tau_div: td, tau_fair: Some(tf), kappa };
            let p = constraint_penalty(ndcg, ild, arp, &c);
            prop_assert!(p >= 0.0);
            let satisfied = ndcg >= ta && ild >= td && arp <= tf;
            prop_assert_eq!(p == 0.0, satisfied || kappa == 0.0);
        }
    }
}
