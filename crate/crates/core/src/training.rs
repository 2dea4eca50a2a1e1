//! Minibatch SGD on the combined loss, plus the sampling, validation-loss and
//! per-epoch logging shared with meta-training.
//!
//! A user's loss terms in a batch read: the user's (positive, sampled
//! negative) pairs, a uniform candidate sample for the category distribution,
//! and the same candidates for the fairness term, measured against a batch
//! reference `r̄` estimated from uniform (user, item) pairs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::encoder::{Embeddings, Encoder, ModelParams, RowGrad};
use crate::grouping::GroupAssignment;
use crate::metrics::{self, Constraints, MetricReport, ScalarMode};
use crate::objectives::{
    accumulate_objective_rows, loss_accuracy, loss_fairness, objective_loss, GroupWeights,
    ObjectiveKind, ObjectiveValues, UserSlice,
};
use crate::{dot, par, sigmoid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Items per user for the category distribution and fairness term.
    pub candidates: usize,
    /// Uniform pairs behind the fairness reference.
    pub fair_pairs: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            candidates: 200,
            fair_pairs: 512,
        }
    }
}

/// Sorted sample without replacement.
pub fn sample_candidates<R: Rng + ?Sized>(num_items: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, num_items, m.min(num_items)).into_vec();
    v.sort_unstable();
    v
}

pub fn sample_pairs<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    n: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.gen_range(0..num_users), rng.gen_range(0..num_items)))
        .collect()
}

/// Mean `σ(r̂)` over the pairs; `None` when there are none.
pub fn fairness_reference(emb: &dyn Embeddings, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let s: f64 = pairs
        .iter()
        .map(|&(u, j)| sigmoid(dot(emb.user(u), emb.item(j))))
        .sum();
    Some(s / pairs.len() as f64)
}

/// `[1, λ_w, β_w]` per group.
pub fn weight_triples(weights: &GroupWeights) -> Vec<[f64; 3]> {
    weights
        .lambda
        .iter()
        .zip(&weights.beta)
        .map(|(&l, &b)| [1.0, l, b])
        .collect()
}

fn triple_for(groups: &GroupAssignment, triples: &[[f64; 3]], user: usize) -> Result<[f64; 3]> {
    let g = groups.group_of(user)?;
    triples.get(g).copied().ok_or_else(|| {
        Error::InvalidInput(format!("group {g} has no weights ({} given)", triples.len()))
    })
}

fn user_values(
    emb: &dyn Embeddings,
    catalog: &crate::dataset::ItemCatalog,
    slice: &UserSlice,
) -> ObjectiveValues {
    ObjectiveValues {
        accuracy: loss_accuracy(emb, &slice.triples()),
        diversity: objective_loss(emb, catalog, ObjectiveKind::Diversity, slice),
        fairness: loss_fairness(emb, &slice.fairness_pairs(), slice.fairness_reference),
    }
}

/// Fixed per-user slices on one held-out split, sampled once so that losses
/// at different epochs are comparable.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    slices: Vec<UserSlice>,
    reference_pairs: Vec<(usize, usize)>,
}

impl ValidationSet {
    pub fn build(dataset: &Dataset, split: Split, sampling: SamplingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let by_user = dataset.items_by_user(split);
        let mut slices = Vec::new();
        for (u, positives) in by_user.iter().enumerate() {
            if positives.is_empty() {
                continue;
            }
            let pairs = positives
                .iter()
                .map(|&p| Ok((p, dataset.sample_negative(u, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let candidates = sample_candidates(dataset.num_items, sampling.candidates, &mut rng);
            slices.push(UserSlice {
                user: u,
                pairs,
                fairness_items: candidates.clone(),
                candidates,
                fairness_reference: None,
            });
        }
        if slices.is_empty() {
            return Err(Error::EmptyDataset("held-out split has no positives"));
        }
        let reference_pairs =
            sample_pairs(dataset.num_users, dataset.num_items, sampling.fair_pairs, &mut rng);
        Ok(Self {
            slices,
            reference_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    fn per_user(&self, emb: &dyn Embeddings, dataset: &Dataset) -> Vec<ObjectiveValues> {
        let r = fairness_reference(emb, &self.reference_pairs);
        par::map(&self.slices, |s| {
            let mut s = s.clone();
            s.fairness_reference = r;
            user_values(emb, &dataset.catalog, &s)
        })
    }

    /// Unweighted objective values averaged over users.
    pub fn objective_means(&self, emb: &dyn Embeddings, dataset: &Dataset) -> ObjectiveValues {
        let vals = self.per_user(emb, dataset);
        let n = vals.len() as f64;
        let mut m = ObjectiveValues::default();
        for v in &vals {
            m.accuracy += v.accuracy / n;
            m.diversity += v.diversity / n;
            m.fairness += v.fairness / n;
        }
        m
    }

    /// Mean over users of `w_acc f_acc + w_div f_div + w_fair f_fair` with the
    /// user's group weights.
    pub fn loss(
        &self,
        emb: &dyn Embeddings,
        dataset: &Dataset,
        groups: &GroupAssignment,
        triples: &[[f64; 3]],
    ) -> Result<f64> {
        let vals = self.per_user(emb, dataset);
        let mut total = 0.0;
        for (s, v) in self.slices.iter().zip(&vals) {
            let w = triple_for(groups, triples, s.user)?;
            total += w[0] * v.accuracy + w[1] * v.diversity + w[2] * v.fairness;
        }
        Ok(total / vals.len() as f64)
    }
}

/// How trained models are scored after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k: usize,
    pub mode: ScalarMode,
    pub constraints: Constraints,
    pub sampling: SamplingConfig,
    /// Seed of the fixed validation slices.
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            k: 20,
            mode: ScalarMode::RescaledSum,
            constraints: Constraints::default(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

/// One line of the per-epoch JSONL log. Epoch 0 is the untrained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub trial: Option<usize>,
    pub epoch: usize,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub ndcg: f64,
    pub ild: f64,
    pub arp: f64,
    pub res_sum: f64,
    pub har_mean: f64,
    pub xi: f64,
    pub wall_ms: u64,
    pub val_loss: f64,
    pub objectives: ObjectiveValues,
    /// `[accuracy, diversity, fairness]` weights per group, summing to 1.
    pub normalized: Vec<[f64; 3]>,
}

/// Everything needed to score a model on the validation split.
pub struct Monitor<'a> {
    pub dataset: &'a Dataset,
    pub encoder: &'a Encoder,
    pub groups: &'a GroupAssignment,
    pub spec: EvalSpec,
    validation: ValidationSet,
}

impl<'a> Monitor<'a> {
    pub fn new(
        dataset: &'a Dataset,
        encoder: &'a Encoder,
        groups: &'a GroupAssignment,
        spec: EvalSpec,
    ) -> Result<Self> {
        let validation = ValidationSet::build(dataset, Split::Validation, spec.sampling, spec.seed)?;
        Ok(Self {
            dataset,
            encoder,
            groups,
            spec,
            validation,
        })
    }

    pub fn validation(&self) -> &ValidationSet {
        &self.validation
    }

    pub fn metrics(&self, params: &ModelParams) -> Result<MetricReport> {
        let eff = self.encoder.effective(params);
        let reports = metrics::evaluate(
            eff.as_ref(),
            self.dataset,
            Split::Validation,
            &[self.spec.k],
            None,
            &self.spec.constraints,
        )?;
        Ok(reports[0])
    }

    pub fn observe(
        &self,
        params: &ModelParams,
        triples: &[[f64; 3]],
        epoch: usize,
        trial: Option<usize>,
        wall_ms: u64,
    ) -> Result<EpochLog> {
        let eff = self.encoder.effective(params);
        let val_loss = self.validation.loss(eff.as_ref(), self.dataset, self.groups, triples)?;
        let objectives = self.validation.objective_means(eff.as_ref(), self.dataset);
        drop(eff);
        let m = self.metrics(params)?;
        Ok(EpochLog {
            trial,
            epoch,
            lambda: triples.iter().map(|w| w[1] / w[0]).collect(),
            beta: triples.iter().map(|w| w[2] / w[0]).collect(),
            ndcg: m.ndcg,
            ild: m.ild,
            arp: m.arp,
            res_sum: m.res_sum,
            har_mean: m.har_mean,
            xi: m.xi(self.spec.mode),
            wall_ms,
            val_loss,
            objectives,
            normalized: triples
                .iter()
                .map(|w| {
                    let s = w[0] + w[1] + w[2];
                    [w[0] / s, w[1] / s, w[2] / s]
                })
                .collect(),
        })
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters at the epoch with the highest ξ.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    /// Epoch 0 first, then one entry per trained epoch.
    pub log: Vec<EpochLog>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn epochs(&self) -> usize {
        self.log.last().map_or(0, |l| l.epoch)
    }

    pub fn initial(&self) -> &EpochLog {
        &self.log[0]
    }

    pub fn last(&self) -> &EpochLog {
        self.log.last().expect("log holds epoch 0")
    }

    pub fn best(&self) -> &EpochLog {
        &self.log[self.best_epoch]
    }
}

/// Tracks the best-ξ epoch while a run progresses.
pub(crate) struct BestTracker {
    pub params: ModelParams,
    pub epoch: usize,
    xi: f64,
}

impl BestTracker {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            params: params.clone(),
            epoch: 0,
            xi: f64::NEG_INFINITY,
        }
    }

    pub fn offer(&mut self, log: &EpochLog, params: &ModelParams) {
        if log.epoch > 0 && log.xi > self.xi {
            self.xi = log.xi;
            self.epoch = log.epoch;
            self.params = params.clone();
        }
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

pub(crate) fn ensure_finite(params: &ModelParams, what: &str) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("parameters diverged during {what}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    /// Training interactions per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Convergence window in epochs.
    pub window: usize,
    /// Stop when the validation loss improved by less than this fraction over
    /// the window.
    pub tolerance: f64,
    pub sampling: SamplingConfig,
    /// Step size of the softmax logits in trainable-weight mode.
    pub logit_lr: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 1024,
            max_epochs: 100,
            window: 5,
            tolerance: 1e-4,
            sampling: SamplingConfig::default(),
            logit_lr: 1e-3,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.window == 0 {
            return Err(Error::InvalidInput(
                "sgd needs lr > 0 and positive batch size, epoch cap and window".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    Fixed(GroupWeights),
    /// Softmax over three logits per group, learned with the parameters.
    Trainable { groups: usize },
}

fn softmax3(z: &[f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

pub(crate) fn has_converged(losses: &[f64], window: usize, tolerance: f64) -> bool {
    let n = losses.len();
    if n <= window {
        return false;
    }
    let old = losses[n - 1 - window];
    let new = losses[n - 1];
    (old - new) / old.abs().max(1e-12) < tolerance
}

/// Epoch training of the weighted loss until the validation loss stalls or
/// the epoch cap is hit.
pub fn train_sgd(
    monitor: &Monitor,
    init: ModelParams,
    mode: &WeightMode,
    cfg: &SgdConfig,
    trial: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = monitor.dataset;
    let encoder = monitor.encoder;
    let groups = monitor.groups;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;

    let mut logits: Vec<[f64; 3]> = match mode {
        WeightMode::Fixed(_) => Vec::new(),
        WeightMode::Trainable { groups: w } => vec![[0.0; 3]; *w],
    };
    let current = |logits: &[[f64; 3]]| -> Vec<[f64; 3]> {
        match mode {
            WeightMode::Fixed(w) => weight_triples(w),
            WeightMode::Trainable { .. } => logits.iter().map(softmax3).collect(),
        }
    };

    let start = Instant::now();
    let first = monitor.observe(&params, &current(&logits), 0, trial, 0)?;
    let mut losses = vec![first.val_loss];
    let mut log = vec![first];
    let mut best = BestTracker::new(&params);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut converged = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let triples = current(&logits);
            let mut by_user: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for &i in chunk {
                let it = &dataset.train[i];
                let neg = dataset.sample_negative(it.user, &mut rng)?;
                by_user.entry(it.user).or_default().push((it.item, neg));
            }
            let eff = encoder.effective(&params);
            let ref_pairs = sample_pairs(
                dataset.num_users,
                dataset.num_items,
                cfg.sampling.fair_pairs,
                &mut rng,
            );
            let reference = fairness_reference(eff.as_ref(), &ref_pairs);
            let mut slices = Vec::with_capacity(by_user.len());
            for (user, pairs) in by_user {
                let candidates =
                    sample_candidates(dataset.num_items, cfg.sampling.candidates, &mut rng);
                // per-user terms count once per epoch, spread over the
                // batches that hold the user's interactions
                let share = pairs.len() as f64 / dataset.train_items[user].len().max(1) as f64;
                let w = triple_for(groups, &triples, user)?;
                slices.push((
                    UserSlice {
                        user,
                        pairs,
                        fairness_items: candidates.clone(),
                        candidates,
                        fairness_reference: reference,
                    },
                    [w[0], w[1] * share, w[2] * share],
                    share,
                ));
            }
            let trainable = !logits.is_empty();
            let emb = eff.as_ref();
            let parts = par::map(&slices, |(slice, w, _)| {
                let mut rows = RowGrad::default();
                for kind in ObjectiveKind::ALL {
                    accumulate_objective_rows(emb, &dataset.catalog, kind, slice, w[kind.index()], &mut rows);
                }
                let values = trainable.then(|| user_values(emb, &dataset.catalog, slice));
                (rows, values)
            });
            let mut rows = RowGrad::default();
            let mut logit_grad = vec![[0.0; 3]; logits.len()];
            for ((slice, _, share), (r, values)) in slices.iter().zip(parts) {
                rows.merge(&r, 1.0);
                if let Some(v) = values {
                    let g = groups.group_of(slice.user)?;
                    let sm = softmax3(&logits[g]);
                    let f = [v.accuracy, share * v.diversity, share * v.fairness];
                    let wf = sm[0] * f[0] + sm[1] * f[1] + sm[2] * f[2];
                    for m in 0..3 {
                        logit_grad[g][m] += sm[m] * (f[m] - wf);
                    }
                }
            }
            drop(eff);
            let base = encoder.base_gradient(rows, &params);
            params.add_scaled(&base, -cfg.lr);
            for (z, g) in logits.iter_mut().zip(&logit_grad) {
                for m in 0..3 {
                    z[m] -= cfg.logit_lr * g[m];
                }
            }
            ensure_finite(&params, "sgd training")?;
        }

        let entry = monitor.observe(&params, &current(&logits), epoch, trial, elapsed_ms(start))?;
        if !entry.val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        losses.push(entry.val_loss);
        best.offer(&entry, &params);
        log.push(entry);
        if has_converged(&losses, cfg.window, cfg.tolerance) {
            converged = true;
            break;
        }
    }

    Ok(TrainOutcome {
        params,
        best_params: best.params,
        best_epoch: best.epoch,
        log,
        converged,
    })
}
