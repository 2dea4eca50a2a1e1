//! User behaviour statistics and k-means grouping.
//!
//! Features per user: number of training positives, distinct categories over
//! items, and mean item popularity. Count and popularity are `ln(1 + x)`
//! transformed by default, then every feature is z-scored (a constant feature
//! keeps unit scale). Clustering is Lloyd's algorithm with k-means++ seeding.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub num_items: usize,
    pub category_ratio: f64,
    pub avg_popularity: f64,
}

pub fn compute_stats(dataset: &Dataset) -> Result<Vec<UserStats>> {
    let catalog = &dataset.catalog;
    dataset
        .train_items
        .iter()
        .enumerate()
        .map(|(u, items)| {
            if items.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "user {u} has no training positives"
                )));
            }
            let mut cats: Vec<usize> = items.iter().map(|&j| catalog.category_of[j]).collect();
            cats.sort_unstable();
            cats.dedup();
            let pop: f64 = items.iter().map(|&j| catalog.popularity[j] as f64).sum();
            Ok(UserStats {
                num_items: items.len(),
                category_ratio: cats.len() as f64 / items.len() as f64,
                avg_popularity: pop / items.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    group_of: Vec<usize>,
    /// Centroids in the standardized feature space.
    pub centroids: Vec<[f64; 3]>,
    num_groups: usize,
}

impl GroupAssignment {
    /// An assignment without centroids, e.g. for hand-built groups.
    pub fn from_groups(group_of: Vec<usize>, num_groups: usize) -> Self {
        Self {
            group_of,
            centroids: Vec::new(),
            num_groups,
        }
    }

    pub fn single(num_users: usize) -> Self {
        Self::from_groups(vec![0; num_users], 1)
    }

    pub fn group_of(&self, user: usize) -> Result<usize> {
        self.group_of.get(user).copied().ok_or(Error::Unassigned(user))
    }

    pub fn assignments(&self) -> &[usize] {
        &self.group_of
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&u| self.group_of[u] == group)
            .collect()
    }

    /// Two columns, `user_id,group`, using the given user labels.
    pub fn write_csv(&self, path: impl AsRef<Path>, user_labels: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("user_id,group\n");
        for (u, g) in self.group_of.iter().enumerate() {
            let label = user_labels.get(u).map_or_else(|| u.to_string(), Clone::clone);
            out.push_str(&format!("{label},{g}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub log_transform: bool,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            log_transform: true,
            max_iter: 100,
            tolerance: 1e-6,
        }
    }
}

pub fn standardized_features(stats: &[UserStats], log_transform: bool) -> Vec<[f64; 3]> {
    let t = |x: f64| if log_transform { x.ln_1p() } else { x };
    let raw: Vec<[f64; 3]> = stats
        .iter()
        .map(|s| [t(s.num_items as f64), s.category_ratio, t(s.avg_popularity)])
        .collect();
    let n = raw.len().max(1) as f64;
    let mut out = raw.clone();
    for k in 0..3 {
        let mean = raw.iter().map(|p| p[k]).sum::<f64>() / n;
        let var = raw.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for (o, p) in out.iter_mut().zip(&raw) {
            o[k] = (p[k] - mean) / sd;
        }
    }
    out
}

pub fn cluster_users(stats: &[UserStats], groups: usize, seed: u64) -> Result<GroupAssignment> {
    cluster_users_with(stats, groups, seed, ClusterOptions::default()).map(|(a, _)| a)
}

pub fn cluster_users_with(
    stats: &[UserStats],
    groups: usize,
    seed: u64,
    options: ClusterOptions,
) -> Result<(GroupAssignment, KMeansFit)> {
    if groups < 1 {
        return Err(Error::InvalidInput("number of groups must be at least 1".into()));
    }
    if stats.len() < groups {
        return Err(Error::InvalidInput(format!(
            "{} users cannot fill {groups} groups",
            stats.len()
        )));
    }
    let points = standardized_features(stats, options.log_transform);
    let fit = kmeans(&points, groups, seed, options.max_iter, options.tolerance);
    Ok((
        GroupAssignment {
            group_of: fit.assignment.clone(),
            centroids: fit.centroids.clone(),
            num_groups: groups,
        },
        fit,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    /// Within-cluster sum of squares after each centroid update.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

pub fn wcss(points: &[[f64; 3]], assignment: &[usize], centroids: &[[f64; 3]]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| dist2(p, &centroids[c]))
        .sum()
}

/// Lloyd iterations from k-means++ seeds. An empty cluster takes the point
/// farthest from its centroid among clusters with more than one member
/// (lowest index on ties). Requires `points.len() >= k >= 1`.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64, max_iter: usize, tol: f64) -> KMeansFit {
    assert!(k >= 1 && points.len() >= k, "need at least k points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    let mut centroids = vec![points[rng.gen_range(0..n)]];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next]);
    }

    let mut assignment = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(p, cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }

        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = f64::NEG_INFINITY;
            for (i, p) in points.iter().enumerate() {
                let a = assignment[i];
                if sizes[a] > 1 {
                    let d = dist2(p, &centroids[a]);
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
            }
            let i = far.expect("some cluster has more than one member");
            sizes[assignment[i]] -= 1;
            assignment[i] = c;
            sizes[c] = 1;
            centroids[c] = points[i];
        }

        let mut sums = vec![[0.0; 3]; k];
        for (p, &c) in points.iter().zip(&assignment) {
            for d in 0..3 {
                sums[c][d] += p[d];
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            let new = [
                sums[c][0] / sizes[c] as f64,
                sums[c][1] / sizes[c] as f64,
                sums[c][2] / sizes[c] as f64,
            ];
            movement = movement.max(dist2(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        history.push(wcss(points, &assignment, &centroids));
        if movement < tol {
            break;
        }
    }

    KMeansFit {
        assignment,
        centroids,
        wcss_history: history,
        iterations,
    }
}
