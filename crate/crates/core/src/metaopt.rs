//! First-order meta-learning with projected per-objective gradients.
//!
//! For every user in a batch: one gradient step on the support set gives the
//! adapted view `Θ_i'`; the three unweighted objective gradients on the query
//! set are taken at `Θ_i'`; conflicting pairs are projected (PCGrad) and the
//! sum is applied to the original `Θ_i`. Item rows shared by several users in
//! a batch move by the average of their per-user updates.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ItemCatalog};
use crate::encoder::{axpy, Embeddings, Encoder, ModelParams, ParamView, RowGrad};
use crate::objectives::{
    accumulate_objective_rows, objective_values, GradientSet, GroupWeights, ObjectiveKind,
    UserSlice,
};
use crate::training::{
    elapsed_ms, ensure_finite, fairness_reference, sample_candidates, sample_pairs,
    weight_triples, BestTracker, Monitor, SamplingConfig, TrainOutcome,
};
use crate::{dot, par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub epochs: usize,
    pub batch_users: usize,
    pub sampling: SamplingConfig,
    /// Project against the other objectives in a random order per user.
    pub shuffled_projection: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            eta1: 1e-2,
            eta2: 1e-2,
            epochs: 5,
            batch_users: 8,
            sampling: SamplingConfig::default(),
            shuffled_projection: false,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) || self.epochs == 0 || self.batch_users == 0 {
            return Err(Error::InvalidInput(
                "meta config needs eta1, eta2 >= 0 and positive epochs and batch size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaVariant {
    /// Plain sum of outer gradients.
    Meta,
    /// Outer gradients projected before summing.
    OrthoMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedView {
    pub view: ParamView,
    pub original: Vec<f64>,
    pub adapted: Vec<f64>,
}

fn view_gradient(
    encoder: &Encoder,
    params: &ModelParams,
    view: &ParamView,
    values: &[f64],
    rows: impl FnOnce(&dyn Embeddings) -> RowGrad,
) -> Result<Vec<f64>> {
    let rows = encoder.with_view(params, view, values, rows);
    let base = encoder.base_gradient(rows, params);
    view.flatten(&base, encoder.is_mf())
}

fn breakdown(
    encoder: &Encoder,
    params: &ModelParams,
    catalog: &ItemCatalog,
    view: &ParamView,
    values: &[f64],
    slice: &UserSlice,
) -> String {
    let v = encoder.with_view(params, view, values, |emb| objective_values(emb, catalog, slice));
    format!(
        "user {}: accuracy {}, diversity {}, fairness {}",
        slice.user, v.accuracy, v.diversity, v.fairness
    )
}

/// `Θ_i' = Θ_i - η₁ ∇F_i(S_i)` for `F = f_acc + λ f_div + β f_fair`.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    encoder: &Encoder,
    params: &ModelParams,
    catalog: &ItemCatalog,
    view: &ParamView,
    lambda: f64,
    beta: f64,
    support: &UserSlice,
    eta1: f64,
) -> Result<AdaptedView> {
    let original = view.gather(params);
    let grad = view_gradient(encoder, params, view, &original, |emb| {
        let mut rows = RowGrad::default();
        for (kind, w) in ObjectiveKind::ALL.into_iter().zip([1.0, lambda, beta]) {
            accumulate_objective_rows(emb, catalog, kind, support, w, &mut rows);
        }
        rows
    })?;
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "inner gradient; {}",
            breakdown(encoder, params, catalog, view, &original, support)
        )));
    }
    let mut adapted = original.clone();
    axpy(&mut adapted, -eta1, &grad);
    Ok(AdaptedView {
        view: view.clone(),
        original,
        adapted,
    })
}

/// Gradients of the unweighted objectives on the query slice at `Θ_i'`.
pub fn outer_gradients(
    encoder: &Encoder,
    params: &ModelParams,
    catalog: &ItemCatalog,
    adapted: &AdaptedView,
    query: &UserSlice,
) -> Result<GradientSet> {
    let grad = |kind| {
        view_gradient(encoder, params, &adapted.view, &adapted.adapted, |emb| {
            let mut rows = RowGrad::default();
            accumulate_objective_rows(emb, catalog, kind, query, 1.0, &mut rows);
            rows
        })
    };
    let set = GradientSet([
        grad(ObjectiveKind::Accuracy)?,
        grad(ObjectiveKind::Diversity)?,
        grad(ObjectiveKind::Fairness)?,
    ]);
    if !set.is_finite() {
        return Err(Error::NonFinite(format!(
            "outer gradient; {}",
            breakdown(encoder, params, catalog, &adapted.view, &adapted.adapted, query)
        )));
    }
    Ok(set)
}

/// Single-pass PCGrad in the fixed order accuracy, diversity, fairness.
pub fn pcgrad_project(grads: &GradientSet) -> GradientSet {
    pcgrad_project_ordered(grads, [0, 1, 2])
}

/// `g̃_m = g_m - Σ_{n≠m} min(⟨g_m, g_n⟩, 0) / ‖g_n‖² · g_n`, always against
/// the original `g_n`, visiting `n` in `order`. Zero-norm `g_n` are skipped.
pub fn pcgrad_project_ordered(grads: &GradientSet, order: [usize; 3]) -> GradientSet {
    let g = &grads.0;
    let norms: Vec<f64> = g.iter().map(|x| dot(x, x)).collect();
    let project = |m: usize| {
        let mut out = g[m].clone();
        for &n in &order {
            if n == m || norms[n] == 0.0 {
                continue;
            }
            let ip = dot(&g[m], &g[n]);
            if ip < 0.0 {
                axpy(&mut out, -ip / norms[n], &g[n]);
            }
        }
        out
    };
    GradientSet([project(0), project(1), project(2)])
}

/// Applies `Θ_i -= η₂ · update_i` for each user's view, averaging over users
/// on shared rows. Each update vector is in its view's coordinates.
pub fn outer_update(params: &mut ModelParams, updates: &[(ParamView, Vec<f64>)], eta2: f64) -> Result<()> {
    let d = params.dim;
    let mut users: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut items: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (view, upd) in updates {
        if upd.len() != view.len() {
            return Err(Error::InvalidInput("update length does not match its view".into()));
        }
        if upd.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("outer update for user {}", view.user())));
        }
        let e = users.entry(view.user()).or_insert_with(|| (vec![0.0; d], 0));
        axpy(&mut e.0, 1.0, &upd[..d]);
        e.1 += 1;
        for (k, &j) in view.items().iter().enumerate() {
            let e = items.entry(j).or_insert_with(|| (vec![0.0; d], 0));
            axpy(&mut e.0, 1.0, &upd[d * (1 + k)..d * (2 + k)]);
            e.1 += 1;
        }
    }
    for (u, (sum, n)) in users {
        axpy(params.user_mut(u), -eta2 / n as f64, &sum);
    }
    for (j, (sum, n)) in items {
        axpy(params.item_mut(j), -eta2 / n as f64, &sum);
    }
    ensure_finite(params, "outer update")
}

struct UserTask {
    support: UserSlice,
    query: UserSlice,
    view: ParamView,
    lambda: f64,
    beta: f64,
    order: [usize; 3],
}

fn slice_for(
    dataset: &Dataset,
    user: usize,
    positives: &[usize],
    candidates: &[usize],
    reference: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<UserSlice> {
    let pairs = positives
        .iter()
        .map(|&p| Ok((p, dataset.sample_negative(user, rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(UserSlice {
        user,
        pairs,
        candidates: candidates.to_vec(),
        fairness_items: candidates.to_vec(),
        fairness_reference: reference,
    })
}

/// One user's inner step, outer gradients and (optionally) projection,
/// returned as the summed update in view coordinates.
fn user_update(
    encoder: &Encoder,
    params: &ModelParams,
    catalog: &ItemCatalog,
    task: &UserTask,
    cfg: &MetaConfig,
    variant: MetaVariant,
) -> Result<Vec<f64>> {
    let adapted = inner_adapt(
        encoder,
        params,
        catalog,
        &task.view,
        task.lambda,
        task.beta,
        &task.support,
        cfg.eta1,
    )?;
    let grads = outer_gradients(encoder, params, catalog, &adapted, &task.query)?;
    let grads = match variant {
        MetaVariant::Meta => grads,
        MetaVariant::OrthoMeta => pcgrad_project_ordered(&grads, task.order),
    };
    Ok(grads.sum())
}

/// A full meta-training run for fixed group weights, scored on the
/// validation split after every epoch.
pub fn run_meta_training(
    monitor: &Monitor,
    init: ModelParams,
    weights: &GroupWeights,
    cfg: &MetaConfig,
    variant: MetaVariant,
    trial: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = monitor.dataset;
    let encoder = monitor.encoder;
    let groups = monitor.groups;
    let triples = weight_triples(weights);
    let mut users = dataset.meta_users();
    if users.is_empty() {
        return Err(Error::EmptyDataset("no user has both support and query items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;

    let start = Instant::now();
    let first = monitor.observe(&params, &triples, 0, trial, 0)?;
    let mut log = vec![first];
    let mut best = BestTracker::new(&params);

    for epoch in 1..=cfg.epochs {
        users.shuffle(&mut rng);
        for batch in users.chunks(cfg.batch_users) {
            let reference = {
                let eff = encoder.effective(&params);
                let pairs =
                    sample_pairs(dataset.num_users, dataset.num_items, cfg.sampling.fair_pairs, &mut rng);
                fairness_reference(eff.as_ref(), &pairs)
            };
            let mut tasks = Vec::with_capacity(batch.len());
            for &u in batch {
                let candidates =
                    sample_candidates(dataset.num_items, cfg.sampling.candidates, &mut rng);
                let support = slice_for(dataset, u, &dataset.support[u], &candidates, reference, &mut rng)?;
                let query = slice_for(dataset, u, &dataset.query[u], &candidates, reference, &mut rng)?;
                let mut scope = support.touched_items();
                scope.extend(query.touched_items());
                let view = ParamView::new(&params, u, scope)?;
                let g = groups.group_of(u)?;
                let w = triples.get(g).ok_or_else(|| {
                    Error::InvalidInput(format!("group {g} has no weights"))
                })?;
                let mut order = [0, 1, 2];
                if cfg.shuffled_projection {
                    order.shuffle(&mut rng);
                }
                tasks.push(UserTask {
                    support,
                    query,
                    view,
                    lambda: w[1],
                    beta: w[2],
                    order,
                });
            }
            let results = par::map(&tasks, |t| {
                user_update(encoder, &params, &dataset.catalog, t, cfg, variant)
            });
            let mut updates = Vec::with_capacity(tasks.len());
            for (t, r) in tasks.into_iter().zip(results) {
                updates.push((t.view, r?));
            }
            outer_update(&mut params, &updates, cfg.eta2)?;
        }
        let entry = monitor.observe(&params, &triples, epoch, trial, elapsed_ms(start))?;
        if !entry.val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        best.offer(&entry, &params);
        log.push(entry);
    }

    Ok(TrainOutcome {
        params,
        best_params: best.params,
        best_epoch: best.epoch,
        log,
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig, EncoderKind};
    use proptest::prelude::*;

    fn set(a: &[f64], b: &[f64], c: &[f64]) -> GradientSet {
        GradientSet([a.to_vec(), b.to_vec(), c.to_vec()])
    }

    #[test]
    fn worked_projection() {
        let p = pcgrad_project(&set(&[1.0, 0.0], &[-1.0, 1.0], &[0.0, 0.0]));
        assert_eq!(p.0[0], vec![0.5, 0.5]);
        assert_eq!(dot(&p.0[0], &[-1.0, 1.0]), 0.0);
    }

    #[test]
    fn orthogonal_inputs_unchanged() {
        let g = set(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(pcgrad_project(&g), g);
    }

    fn catalog(n: usize) -> ItemCatalog {
        ItemCatalog {
            category_of: (0..n).map(|j| j % 2).collect(),
            popularity: vec![1; n],
            num_categories: 2,
        }
    }

    fn slice(user: usize) -> UserSlice {
        UserSlice {
            user,
            pairs: vec![(0, 3), (1, 2)],
            candidates: vec![0, 1, 2, 3],
            fairness_items: vec![0, 1, 2, 3],
            fairness_reference: Some(0.5),
        }
    }

    fn mf(users: usize, items: usize, seed: u64) -> (Encoder, ModelParams) {
        let cfg = EncoderConfig {
            kind: EncoderKind::Mf,
            dim: 3,
            num_layers: 0,
            init_scale: 0.5,
        };
        let enc = Encoder::new(cfg.clone(), users, items, &[]).unwrap();
        (enc, init_params(&cfg, users, items, seed).unwrap())
    }

    #[test]
    fn zero_step_keeps_view() {
        let (enc, p) = mf(1, 4, 1);
        let view = ParamView::new(&p, 0, 0..4).unwrap();
        let a = inner_adapt(&enc, &p, &catalog(4), &view, 1.0, 1.0, &slice(0), 0.0).unwrap();
        assert_eq!(a.adapted, a.original);
    }

    #[test]
    fn inner_step_descends() {
        let (enc, p) = mf(1, 4, 2);
        let cat = catalog(4);
        let view = ParamView::new(&p, 0, 0..4).unwrap();
        let s = slice(0);
        let a = inner_adapt(&enc, &p, &cat, &view, 0.5, 2.0, &s, 1e-3).unwrap();
        let before = enc.with_view(&p, &view, &a.original, |e| objective_values(e, &cat, &s).weighted(0.5, 2.0));
        let after = enc.with_view(&p, &view, &a.adapted, |e| objective_values(e, &cat, &s).weighted(0.5, 2.0));
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn outer_reduces_to_plain_gradient() {
        let (enc, p) = mf(1, 4, 3);
        let cat = catalog(4);
        let view = ParamView::new(&p, 0, 0..4).unwrap();
        let s = slice(0);
        let a = inner_adapt(&enc, &p, &cat, &view, 1.0, 1.0, &s, 0.0).unwrap();
        let g = outer_gradients(&enc, &p, &cat, &a, &s).unwrap();
        for kind in ObjectiveKind::ALL {
            let plain = crate::objectives::objective_gradient(&enc, &p, &cat, &view, kind, &s).unwrap();
            assert_eq!(g.get(kind), &plain[..]);
        }
    }

    #[test]
    fn outer_matches_finite_differences_at_adapted_point() {
        let (enc, p) = mf(1, 4, 4);
        let cat = catalog(4);
        let view = ParamView::new(&p, 0, 0..4).unwrap();
        let s = UserSlice {
            fairness_reference: Some(0.3),
            ..slice(0)
        };
        let a = inner_adapt(&enc, &p, &cat, &view, 1.0, 1.0, &s, 0.05).unwrap();
        let g = outer_gradients(&enc, &p, &cat, &a, &s).unwrap();
        let h = 1e-5;
        for kind in ObjectiveKind::ALL {
            for i in 0..a.adapted.len() {
                let mut plus = a.adapted.clone();
                let mut minus = a.adapted.clone();
                plus[i] += h;
                minus[i] -= h;
                let f = |x: &[f64]| {
                    enc.with_view(&p, &view, x, |e| objective_values(e, &cat, &s).get(kind))
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = g.get(kind)[i];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{kind:?}[{i}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_embeddings_have_zero_diversity_gradient() {
        let (enc, _) = mf(1, 4, 0);
        let p = ModelParams::zeros(1, 4, 3);
        let cat = catalog(4);
        let view = ParamView::new(&p, 0, 0..4).unwrap();
        let s = slice(0);
        let a = inner_adapt(&enc, &p, &cat, &view, 1.0, 1.0, &s, 0.0).unwrap();
        let g = outer_gradients(&enc, &p, &cat, &a, &s).unwrap();
        assert!(g.get(ObjectiveKind::Diversity).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn update_rules() {
        let p0 = ModelParams {
            dim: 1,
            num_users: 2,
            num_items: 2,
            users: vec![1.0, 1.0],
            items: vec![1.0, 1.0],
        };
        let v0 = ParamView::new(&p0, 0, [0]).unwrap();
        let v1 = ParamView::new(&p0, 1, [0, 1]).unwrap();

        let mut p = p0.clone();
        outer_update(&mut p, &[(v0.clone(), vec![1.0, 2.0])], 0.0).unwrap();
        assert_eq!(p, p0);

        outer_update(&mut p, &[(v0.clone(), vec![1.0, 2.0])], 0.5).unwrap();
        assert_eq!(p.users, vec![0.5, 1.0]);
        assert_eq!(p.items, vec![0.0, 1.0]);

        let mut p = p0.clone();
        outer_update(&mut p, &[(v0, vec![0.0, 2.0]), (v1, vec![0.0, 4.0, 1.0])], 0.5).unwrap();
        // item 0 moves by 0.5 * (2 + 4) / 2
        assert_eq!(p.items, vec![-0.5, 0.5]);
    }

    fn arb_set() -> impl Strategy<Value = GradientSet> {
        (1usize..6).prop_flat_map(|n| {
            proptest::array::uniform3(proptest::collection::vec(-3.0f64..3.0, n))
                .prop_map(GradientSet)
        })
    }

    proptest! {
        #[test]
        fn projection_properties(g in arb_set()) {
            let p = pcgrad_project(&g);
            for m in 0..3 {
                let mut bound = dot(&g.0[m], &g.0[m]).sqrt();
                for n in 0..3 {
                    if n == m {
                        continue;
                    }
                    let nn = dot(&g.0[n], &g.0[n]);
                    let original = dot(&g.0[m], &g.0[n]);
                    if nn > 0.0 {
                        bound += original.abs() / nn.sqrt();
                    }
                }
                prop_assert!(dot(&p.0[m], &p.0[m]).sqrt() <= bound + 1e-9);
            }
            let conflict_free = (0..3).all(|m| (0..3).all(|n| m == n || dot(&g.0[m], &g.0[n]) >= 0.0));
            if conflict_free {
                prop_assert_eq!(&p, &g);
            }
        }

        #[test]
        fn pairwise_conflict_is_removed(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let zero = vec![0.0; 4];
            let p = pcgrad_project(&set(&a, &b, &zero));
            if dot(&a, &b) < 0.0 {
                prop_assert!(dot(&p.0[0], &b) >= -1e-9);
                prop_assert!(dot(&p.0[1], &a) >= -1e-9);
            }
        }
    }
}
