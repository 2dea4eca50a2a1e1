//! Accuracy, diversity and fairness losses, their analytic gradients, and the
//! group-weighted combined loss.
//!
//! - accuracy: BPR, `-Σ log σ(r̂_uj - r̂_uk)` over (user, positive, negative).
//! - diversity: negative entropy of a softmax over per-category score sums.
//! - fairness: mean `|σ(r̂_uj) - r̄|`; `r̄` is a constant for differentiation.
//!
//! Gradients are computed on effective (scored) rows as a [`RowGrad`]; use
//! [`objective_gradient`] to get them in a [`ParamView`]'s coordinates.

use serde::{Deserialize, Serialize};

use crate::dataset::ItemCatalog;
use crate::encoder::{Embeddings, Encoder, ModelParams, ParamView, RowGrad};
use crate::grouping::GroupAssignment;
use crate::{dot, sigmoid, softplus, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Accuracy,
    Diversity,
    Fairness,
}

impl ObjectiveKind {
    /// Fixed order used for projections and reporting.
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::Accuracy,
        ObjectiveKind::Diversity,
        ObjectiveKind::Fairness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-group diversity weights `λ` and fairness weights `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GroupWeights {
    pub const SEARCH_MIN: f64 = 0.01;
    pub const SEARCH_MAX: f64 = 10.0;

    pub fn new(lambda: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if lambda.len() != beta.len() || lambda.is_empty() {
            return Err(Error::InvalidInput(
                "lambda and beta need the same non-zero length".into(),
            ));
        }
        if lambda.iter().chain(&beta).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        Ok(Self { lambda, beta })
    }

    pub fn uniform(groups: usize, lambda: f64, beta: f64) -> Self {
        Self {
            lambda: vec![lambda; groups],
            beta: vec![beta; groups],
        }
    }

    pub fn groups(&self) -> usize {
        self.lambda.len()
    }

    pub fn in_search_box(&self) -> bool {
        self.lambda
            .iter()
            .chain(&self.beta)
            .all(|w| (Self::SEARCH_MIN..=Self::SEARCH_MAX).contains(w))
    }

    /// `(1, λ_w, β_w) / (1 + λ_w + β_w)`: accuracy weight fixed at one.
    pub fn normalized(&self, group: usize) -> [f64; 3] {
        let (l, b) = (self.lambda[group], self.beta[group]);
        let s = 1.0 + l + b;
        [1.0 / s, l / s, b / s]
    }
}

/// One flattened gradient per objective, in [`ObjectiveKind::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub [Vec<f64>; 3]);

impl GradientSet {
    pub fn get(&self, kind: ObjectiveKind) -> &[f64] {
        &self.0[kind.index()]
    }

    pub fn sum(&self) -> Vec<f64> {
        let mut out = self.0[0].clone();
        for g in &self.0[1..] {
            crate::encoder::axpy(&mut out, 1.0, g);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Everything one user's loss terms read.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSlice {
    pub user: usize,
    /// (positive, negative) item pairs for BPR.
    pub pairs: Vec<(usize, usize)>,
    /// Items whose scores form the category distribution.
    pub candidates: Vec<usize>,
    /// Items paired with this user in the fairness term.
    pub fairness_items: Vec<usize>,
    /// Fixed `r̄`; `None` uses the mean over this slice's own pairs.
    pub fairness_reference: Option<f64>,
}

impl UserSlice {
    pub fn triples(&self) -> Vec<Triple> {
        self.pairs
            .iter()
            .map(|&(pos, neg)| Triple {
                user: self.user,
                pos,
                neg,
            })
            .collect()
    }

    pub fn fairness_pairs(&self) -> Vec<(usize, usize)> {
        self.fairness_items.iter().map(|&j| (self.user, j)).collect()
    }

    /// Every item any of the terms reads.
    pub fn touched_items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|&(p, n)| [p, n])
            .chain(self.candidates.iter().copied())
            .chain(self.fairness_items.iter().copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub accuracy: f64,
    pub diversity: f64,
    pub fairness: f64,
}

impl ObjectiveValues {
    pub fn get(&self, kind: ObjectiveKind) -> f64 {
        match kind {
            ObjectiveKind::Accuracy => self.accuracy,
            ObjectiveKind::Diversity => self.diversity,
            ObjectiveKind::Fairness => self.fairness,
        }
    }

    pub fn weighted(&self, lambda: f64, beta: f64) -> f64 {
        self.accuracy + lambda * self.diversity + beta * self.fairness
    }
}

pub fn loss_accuracy(emb: &dyn Embeddings, triples: &[Triple]) -> f64 {
    triples
        .iter()
        .map(|t| {
            let u = emb.user(t.user);
            let gap = dot(u, emb.item(t.pos)) - dot(u, emb.item(t.neg));
            softplus(-gap)
        })
        .sum()
}

fn category_scores(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    user: usize,
    candidates: &[usize],
) -> Vec<f64> {
    let u = emb.user(user);
    let mut s = vec![0.0; catalog.num_categories];
    for &j in candidates {
        s[catalog.category_of[j]] += dot(u, emb.item(j));
    }
    s
}

fn log_softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    s.iter().map(|x| x - lse).collect()
}

/// Softmax over categories of the summed candidate scores; categories without
/// a candidate contribute a zero logit.
pub fn category_distribution(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    user: usize,
    candidates: &[usize],
) -> Vec<f64> {
    log_softmax(&category_scores(emb, catalog, user, candidates))
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn neg_entropy(logp: &[f64]) -> f64 {
    logp.iter().map(|&lp| lp.exp() * lp).sum()
}

/// `Σ_users Σ_l p_l log p_l`.
pub fn loss_diversity(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    per_user: &[(usize, &[usize])],
) -> f64 {
    per_user
        .iter()
        .map(|&(u, cands)| neg_entropy(&log_softmax(&category_scores(emb, catalog, u, cands))))
        .sum()
}

fn fairness_mean(emb: &dyn Embeddings, pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(u, j)| sigmoid(dot(emb.user(u), emb.item(j))))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Mean absolute deviation of `σ(r̂)` from `reference`, or from the sample
/// mean when `reference` is `None`. Zero for an empty sample.
pub fn loss_fairness(emb: &dyn Embeddings, pairs: &[(usize, usize)], reference: Option<f64>) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let r_bar = reference.unwrap_or_else(|| fairness_mean(emb, pairs));
    pairs
        .iter()
        .map(|&(u, j)| (sigmoid(dot(emb.user(u), emb.item(j))) - r_bar).abs())
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn objective_values(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    slice: &UserSlice,
) -> ObjectiveValues {
    ObjectiveValues {
        accuracy: objective_loss(emb, catalog, ObjectiveKind::Accuracy, slice),
        diversity: objective_loss(emb, catalog, ObjectiveKind::Diversity, slice),
        fairness: objective_loss(emb, catalog, ObjectiveKind::Fairness, slice),
    }
}

pub fn objective_loss(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    kind: ObjectiveKind,
    slice: &UserSlice,
) -> f64 {
    match kind {
        ObjectiveKind::Accuracy => loss_accuracy(emb, &slice.triples()),
        ObjectiveKind::Diversity => {
            if slice.candidates.is_empty() {
                0.0
            } else {
                loss_diversity(emb, catalog, &[(slice.user, &slice.candidates)])
            }
        }
        ObjectiveKind::Fairness => {
            loss_fairness(emb, &slice.fairness_pairs(), slice.fairness_reference)
        }
    }
}

/// `f_acc + λ_w f_div + β_w f_fair` for the user's group `w`.
pub fn combined_loss(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    groups: &GroupAssignment,
    weights: &GroupWeights,
    slice: &UserSlice,
) -> Result<f64> {
    let w = groups.group_of(slice.user)?;
    let (l, b) = weights_for(weights, w)?;
    Ok(objective_values(emb, catalog, slice).weighted(l, b))
}

pub(crate) fn weights_for(weights: &GroupWeights, group: usize) -> Result<(f64, f64)> {
    match (weights.lambda.get(group), weights.beta.get(group)) {
        (Some(&l), Some(&b)) => Ok((l, b)),
        _ => Err(Error::InvalidInput(format!(
            "group {group} has no weights ({} groups weighted)",
            weights.groups()
        ))),
    }
}

/// Gradient of one objective with respect to effective rows, scaled by `scale`
/// and added to `out`.
pub fn accumulate_objective_rows(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    kind: ObjectiveKind,
    slice: &UserSlice,
    scale: f64,
    out: &mut RowGrad,
) {
    if scale == 0.0 {
        return;
    }
    let user = slice.user;
    let u = emb.user(user);
    let d = emb.dim();
    match kind {
        ObjectiveKind::Accuracy => {
            // d/dgap softplus(-gap) = -σ(-gap)
            let mut gu = vec![0.0; d];
            for &(pos, neg) in &slice.pairs {
                let (vp, vn) = (emb.item(pos), emb.item(neg));
                let gap = dot(u, vp) - dot(u, vn);
                let c = -sigmoid(-gap) * scale;
                for k in 0..d {
                    gu[k] += c * (vp[k] - vn[k]);
                }
                out.add_item(pos, c, u);
                out.add_item(neg, -c, u);
            }
            out.add_user(user, 1.0, &gu);
        }
        ObjectiveKind::Diversity => {
            if slice.candidates.is_empty() {
                return;
            }
            let logp = log_softmax(&category_scores(emb, catalog, user, &slice.candidates));
            let entropy = -neg_entropy(&logp);
            // dL/ds_l = p_l (log p_l + H)
            let ds: Vec<f64> = logp.iter().map(|&lp| lp.exp() * (lp + entropy)).collect();
            let mut gu = vec![0.0; d];
            for &j in &slice.candidates {
                let c = ds[catalog.category_of[j]] * scale;
                if c != 0.0 {
                    crate::encoder::axpy(&mut gu, c, emb.item(j));
                    out.add_item(j, c, u);
                }
            }
            out.add_user(user, 1.0, &gu);
        }
        ObjectiveKind::Fairness => {
            let n = slice.fairness_items.len();
            if n == 0 {
                return;
            }
            let pairs = slice.fairness_pairs();
            let r_bar = slice
                .fairness_reference
                .unwrap_or_else(|| fairness_mean(emb, &pairs));
            let mut gu = vec![0.0; d];
            for &j in &slice.fairness_items {
                let v = emb.item(j);
                let s = sigmoid(dot(u, v));
                let diff = s - r_bar;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let c = sign * s * (1.0 - s) / n as f64 * scale;
                if c != 0.0 {
                    crate::encoder::axpy(&mut gu, c, v);
                    out.add_item(j, c, u);
                }
            }
            out.add_user(user, 1.0, &gu);
        }
    }
}

pub fn objective_rows(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    kind: ObjectiveKind,
    slice: &UserSlice,
) -> RowGrad {
    let mut g = RowGrad::default();
    accumulate_objective_rows(emb, catalog, kind, slice, 1.0, &mut g);
    g
}

/// Gradient of `f_acc + λ f_div + β f_fair` on effective rows.
pub fn combined_rows(
    emb: &dyn Embeddings,
    catalog: &ItemCatalog,
    lambda: f64,
    beta: f64,
    slice: &UserSlice,
) -> RowGrad {
    let mut g = RowGrad::default();
    for (kind, w) in ObjectiveKind::ALL.into_iter().zip([1.0, lambda, beta]) {
        accumulate_objective_rows(emb, catalog, kind, slice, w, &mut g);
    }
    g
}

/// Analytic gradient of one objective in the view's flattened coordinates.
///
/// Under MF a touched row outside the view is an error. Under LightGCN every
/// parameter reachable through propagation is touched; the gradient is
/// restricted to the view's rows.
pub fn objective_gradient(
    encoder: &Encoder,
    params: &ModelParams,
    catalog: &ItemCatalog,
    view: &ParamView,
    kind: ObjectiveKind,
    slice: &UserSlice,
) -> Result<Vec<f64>> {
    let eff = encoder.effective(params);
    let rows = objective_rows(eff.as_ref(), catalog, kind, slice);
    let base = encoder.base_gradient(rows, params);
    view.flatten(&base, encoder.is_mf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn catalog(cats: &[usize], ncat: usize) -> ItemCatalog {
        ItemCatalog {
            category_of: cats.to_vec(),
            popularity: vec![0; cats.len()],
            num_categories: ncat,
        }
    }

    fn params_1d(user: &[f64], items: &[&[f64]]) -> ModelParams {
        let d = user.len();
        let mut p = ModelParams::zeros(1, items.len(), d);
        p.user_mut(0).copy_from_slice(user);
        for (j, v) in items.iter().enumerate() {
            p.item_mut(j).copy_from_slice(v);
        }
        p
    }

    #[test]
    fn bpr_at_zero_gap_is_log2() {
        let p = params_1d(&[1.0, 2.0], &[&[0.5, 0.5], &[0.5, 0.5]]);
        let t = [Triple { user: 0, pos: 0, neg: 1 }];
        let expected = -(0.5f64).ln();
        assert!((loss_accuracy(&p, &t) - expected).abs() < 1e-15);
        assert!((expected - 0.693147).abs() < 1e-6);
        assert!((loss_accuracy(&p, &[t[0], t[0]]) - 2.0 * loss_accuracy(&p, &t)).abs() < 1e-15);
    }

    #[test]
    fn bpr_saturates() {
        let p = params_1d(&[1.0], &[&[10.0], &[-10.0]]);
        assert!(loss_accuracy(&p, &[Triple { user: 0, pos: 0, neg: 1 }]) < 1e-6);
        // large negative gap stays finite
        let q = params_1d(&[1.0], &[&[-500.0], &[500.0]]);
        let l = loss_accuracy(&q, &[Triple { user: 0, pos: 0, neg: 1 }]);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn category_distribution_cases() {
        let cat = catalog(&[0, 1], 2);
        let p = params_1d(&[1.0], &[&[0.7], &[0.7]]);
        let d = category_distribution(&p, &cat, 0, &[0, 1]);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);

        let p = params_1d(&[1.0], &[&[1.0], &[0.0]]);
        let d = category_distribution(&p, &cat, 0, &[0, 1]);
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((d[0] - 0.7311).abs() < 1e-4 && (d[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn empty_category_gets_zero_logit() {
        let cat = catalog(&[0, 0], 2);
        let p = params_1d(&[1.0], &[&[0.0], &[0.0]]);
        let d = category_distribution(&p, &cat, 0, &[0, 1]);
        assert_eq!(d, vec![0.5, 0.5]);
    }

    #[test]
    fn diversity_extremes() {
        let cat = catalog(&[0, 1], 2);
        let p = params_1d(&[1.0], &[&[0.3], &[0.3]]);
        let l = loss_diversity(&p, &cat, &[(0, &[0, 1])]);
        assert!((l + 2f64.ln()).abs() < 1e-12);
        assert!((l + 0.693147).abs() < 1e-6);
        let p = params_1d(&[1.0], &[&[50.0], &[0.0]]);
        let l = loss_diversity(&p, &cat, &[(0, &[0, 1])]);
        assert!(l.abs() < 1e-15, "{l}");
    }

    #[test]
    fn fairness_cases() {
        // σ(r) = 0.2 and 0.8
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let p = params_1d(&[1.0], &[&[logit(0.2)], &[logit(0.8)]]);
        let l = loss_fairness(&p, &[(0, 0), (0, 1)], None);
        assert!((l - 0.3).abs() < 1e-12);
        let q = params_1d(&[1.0], &[&[0.4], &[0.4]]);
        assert_eq!(loss_fairness(&q, &[(0, 0), (0, 1)], None), 0.0);
    }

    #[test]
    fn accuracy_gradient_at_zero_gap() {
        // scores 0.5 and 0.5
        let q = params_1d(&[1.0, 0.0], &[&[0.5, 3.0], &[0.5, -1.0]]);
        let slice = UserSlice {
            user: 0,
            pairs: vec![(0, 1)],
            candidates: vec![],
            fairness_items: vec![],
            fairness_reference: None,
        };
        let g = objective_rows(&q, &catalog(&[0, 0], 1), ObjectiveKind::Accuracy, &slice);
        let gu = &g.users[&0];
        // -½ (v_j - v_k) = -½ (0, 4)
        assert!(gu[0].abs() < 1e-15 && (gu[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_distribution_is_stationary() {
        let cat = catalog(&[0, 1, 2, 0, 1, 2], 3);
        let mut p = init_params(
            &EncoderConfig {
                dim: 3,
                ..Default::default()
            },
            1,
            6,
            4,
        )
        .unwrap();
        // identical item rows make every category sum equal
        let row = p.item(0).to_vec();
        for j in 0..6 {
            p.item_mut(j).copy_from_slice(&row);
        }
        let slice = UserSlice {
            user: 0,
            pairs: vec![],
            candidates: (0..6).collect(),
            fairness_items: vec![],
            fairness_reference: None,
        };
        let g = objective_rows(&p, &cat, ObjectiveKind::Diversity, &slice);
        assert!(g.users.values().chain(g.items.values()).flatten().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn combined_loss_weights() {
        use crate::grouping::GroupAssignment;
        let cat = catalog(&[0, 1, 0, 1], 2);
        let p = init_params(
            &EncoderConfig {
                dim: 3,
                ..Default::default()
            },
            2,
            4,
            9,
        )
        .unwrap();
        let groups = GroupAssignment::from_groups(vec![0, 1], 2);
        let slice = UserSlice {
            user: 1,
            pairs: vec![(0, 1), (2, 3)],
            candidates: vec![0, 1, 2, 3],
            fairness_items: vec![0, 1, 2, 3],
            fairness_reference: None,
        };
        let vals = objective_values(&p, &cat, &slice);
        let zero = GroupWeights::new(vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(combined_loss(&p, &cat, &groups, &zero, &slice).unwrap(), vals.accuracy);
        let unit = GroupWeights::uniform(2, 1.0, 1.0);
        let l1 = combined_loss(&p, &cat, &groups, &unit, &slice).unwrap();
        assert!((l1 - (vals.accuracy + vals.diversity + vals.fairness)).abs() < 1e-15);
        let doubled = GroupWeights::new(vec![1.0, 1.0], vec![1.0, 2.0]).unwrap();
        let l2 = combined_loss(&p, &cat, &groups, &doubled, &slice).unwrap();
        assert!((l2 - l1 - vals.fairness).abs() < 1e-12);

        let unassigned = UserSlice { user: 5, ..slice };
        assert!(matches!(
            combined_loss(&p, &cat, &groups, &unit, &unassigned),
            Err(Error::Unassigned(5))
        ));
    }

    #[test]
    fn normalized_weights() {
        let w = GroupWeights::uniform(1, 1.0, 1.0);
        for x in w.normalized(0) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = GroupWeights::new(vec![0.9724], vec![4.7997]).unwrap();
        assert!((w.normalized(0)[0] - 0.1477).abs() < 5e-5);
    }
}
