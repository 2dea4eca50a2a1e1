//! Gaussian-process Bayesian optimization over the group weights.
//!
//! Weights live in `[0.01, 10]` per dimension and are searched in log space:
//! `z = (log10 x + 2) / 3` maps the box onto `[0, 1]`. The surrogate is an
//! isotropic Matérn-5/2 GP on standardized observations whose hyperparameters
//! are picked by log marginal likelihood over a fixed grid.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::metrics::MetricReport;
use crate::objectives::GroupWeights;
use crate::{Error, Result};

const LOG_MIN: f64 = -2.0;
const LOG_SPAN: f64 = 3.0;

/// The `2W`-dimensional box of `(λ_1..λ_W, β_1..β_W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchSpace {
    groups: usize,
}

impl SearchSpace {
    pub fn new(groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidInput("search space needs at least one group".into()));
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn dim(&self) -> usize {
        2 * self.groups
    }

    /// Maps weights into the unit box. Weights outside `[0.01, 10]` are an error.
    pub fn encode(&self, w: &GroupWeights) -> Result<Vec<f64>> {
        if w.groups() != self.groups {
            return Err(Error::InvalidInput(format!(
                "weights have {} groups, search space has {}",
                w.groups(),
                self.groups
            )));
        }
        w.lambda
            .iter()
            .chain(&w.beta)
            .map(|&x| {
                if !(GroupWeights::SEARCH_MIN..=GroupWeights::SEARCH_MAX).contains(&x) {
                    return Err(Error::InvalidInput(format!("weight {x} outside the search box")));
                }
                Ok((x.log10() - LOG_MIN) / LOG_SPAN)
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode); coordinates are clipped to `[0, 1]` first.
    pub fn decode(&self, z: &[f64]) -> GroupWeights {
        assert_eq!(z.len(), self.dim(), "encoded point has the wrong dimension");
        let w: Vec<f64> = z
            .iter()
            .map(|&c| 10f64.powf(LOG_MIN + LOG_SPAN * c.clamp(0.0, 1.0)))
            .map(|x| x.clamp(GroupWeights::SEARCH_MIN, GroupWeights::SEARCH_MAX))
            .collect();
        GroupWeights {
            lambda: w[..self.groups].to_vec(),
            beta: w[self.groups..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
}

const SIGNAL_GRID: [f64; 3] = [0.25, 1.0, 4.0];
const LENGTH_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
const NOISE_GRID: [f64; 3] = [1e-6, 1e-4, 1e-2];
const JITTER: f64 = 1e-8;
const MAX_JITTER_TRIES: usize = 12;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn matern52(r: f64, h: &GpHyper) -> f64 {
    let s = 5f64.sqrt() * r / h.lengthscale;
    h.signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// A fitted surrogate. Observations are stored standardized; `y_mean` and
/// `y_std` undo it.
#[derive(Debug, Clone)]
pub struct GpState {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    log_marginal: f64,
}

fn factor(x: &[Vec<f64>], y: &[f64], h: &GpHyper) -> Option<(DMatrix<f64>, DVector<f64>, f64, f64)> {
    let n = x.len();
    let base = DMatrix::from_fn(n, n, |i, j| matern52(distance(&x[i], &x[j]), h));
    let mut jitter = 0.0;
    for _ in 0..MAX_JITTER_TRIES {
        let k = &base + DMatrix::identity(n, n) * (h.noise_var + jitter);
        if let Some(c) = k.cholesky() {
            let l = c.l();
            let alpha = c.solve(&DVector::from_column_slice(y));
            let yv = DVector::from_column_slice(y);
            let log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * yv.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some((l, alpha, jitter, lml));
        }
        jitter = if jitter == 0.0 { JITTER } else { jitter * 10.0 };
    }
    None
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    (y.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::NoSuccessfulTrials);
    }
    if x.len() != y.len() {
        return Err(Error::InvalidInput("GP inputs and observations differ in length".into()));
    }
    let d = x[0].len();
    if x.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("GP data must be finite with a common dimension".into()));
    }
    Ok(())
}

/// Fits with hyperparameters chosen by log marginal likelihood over the grid.
/// Ties keep the first grid point.
pub fn gp_fit(x: &[Vec<f64>], y: &[f64]) -> Result<GpState> {
    check_inputs(x, y)?;
    let (ys, mean, std) = standardize(y);
    let mut best: Option<GpState> = None;
    for &signal_var in &SIGNAL_GRID {
        for &lengthscale in &LENGTH_GRID {
            for &noise_var in &NOISE_GRID {
                let hyper = GpHyper { signal_var, lengthscale, noise_var };
                let Some((chol, alpha, jitter, lml)) = factor(x, &ys, &hyper) else {
                    continue;
                };
                if best.as_ref().map_or(true, |b| lml > b.log_marginal) {
                    best = Some(GpState {
                        x: x.to_vec(),
                        y: ys.clone(),
                        y_mean: mean,
                        y_std: std,
                        hyper,
                        chol,
                        alpha,
                        jitter,
                        log_marginal: lml,
                    });
                }
            }
        }
    }
    let best = best.ok_or_else(|| Error::NonFinite("no grid point gave a positive definite kernel".into()))?;
    debug!("gp fit n={} hyper={:?} lml={:.4}", x.len(), best.hyper, best.log_marginal);
    Ok(best)
}

/// Fits with fixed hyperparameters.
pub fn gp_fit_with(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<GpState> {
    check_inputs(x, y)?;
    let (ys, y_mean, y_std) = standardize(y);
    let (chol, alpha, jitter, log_marginal) =
        factor(x, &ys, &hyper).ok_or_else(|| Error::NonFinite("kernel matrix is not positive definite".into()))?;
    Ok(GpState {
        x: x.to_vec(),
        y: ys,
        y_mean,
        y_std,
        hyper,
        chol,
        alpha,
        jitter,
        log_marginal,
    })
}

impl GpState {
    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Largest standardized observation.
    pub fn best_standardized(&self) -> f64 {
        self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn standardized(&self) -> &[f64] {
        &self.y
    }

    /// Posterior mean and stddev of the latent function, standardized units.
    pub fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|p| matern52(distance(p, x), &self.hyper)));
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&k)
            .expect("Cholesky factor has a positive diagonal");
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }
}

/// Posterior mean and stddev in the original units of the observations.
pub fn gp_predict(state: &GpState, x: &[f64]) -> (f64, f64) {
    let (m, s) = state.predict_standardized(x);
    (state.y_mean + state.y_std * m, state.y_std * s)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `EI = (μ - best)·Φ(z) + s·φ(z)` with `z = (μ - best)/s`, or `max(μ - best, 0)` at `s = 0`.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let gain = mean - best;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let n = std_normal();
    let z = gain / std;
    (gain * n.cdf(z) + std * n.pdf(z)).max(0.0)
}

/// EI of a point under the fitted surrogate, in standardized units.
pub fn gp_expected_improvement(state: &GpState, x: &[f64]) -> f64 {
    let (m, s) = state.predict_standardized(x);
    expected_improvement(m, s, state.best_standardized())
}

pub const RANDOM_CANDIDATES: usize = 1024;
pub const PERTURBED_CANDIDATES: usize = 16;
pub const PERTURBATION_STD: f64 = 0.05;

/// Maximizes EI over random points in the unit box plus perturbed copies of the
/// best observations. EI ties go to the larger posterior stddev.
pub fn propose_next(state: &GpState, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = state.x[0].len();
    let mut candidates: Vec<Vec<f64>> = (0..RANDOM_CANDIDATES)
        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mut order: Vec<usize> = (0..state.len()).collect();
    order.sort_by(|&a, &b| state.y[b].total_cmp(&state.y[a]).then(a.cmp(&b)));
    let noise = NormalSampler::new(0.0, PERTURBATION_STD).expect("positive stddev");
    for &i in order.iter().take(PERTURBED_CANDIDATES) {
        candidates.push(
            state.x[i]
                .iter()
                .map(|&c| (c + noise.sample(rng)).clamp(0.0, 1.0))
                .collect(),
        );
    }
    let best_y = state.best_standardized();
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let (m, s) = state.predict_standardized(c);
        let ei = expected_improvement(m, s, best_y);
        let better = match best {
            None => true,
            Some((bei, bs, _)) => ei > bei || (ei == bei && s > bs),
        };
        if better {
            best = Some((ei, s, i));
        }
    }
    let (_, _, i) = best.expect("candidate set is non-empty");
    candidates.swap_remove(i)
}

/// `n` points in `[0,1]^d`, one per stratum in every dimension.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in points.iter_mut().zip(strata) {
            p[j] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub trials: usize,
    pub init_points: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            init_points: 10,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.init_points == 0 || self.init_points > self.trials {
            return Err(Error::InvalidInput(format!(
                "need 1 <= init_points <= trials, got {} and {}",
                self.init_points, self.trials
            )));
        }
        Ok(())
    }
}

/// What a trial reports back to the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    /// Final-epoch ξ; the GP observation.
    pub xi: f64,
    /// Best ξ over the trial's epochs; used to pick the returned trial.
    pub best_xi: f64,
    pub best_epoch: usize,
    pub metrics: Option<MetricReport>,
    pub checkpoint: Option<String>,
}

impl TrialOutcome {
    /// An outcome with a single observation and nothing else attached.
    pub fn scalar(xi: f64) -> Self {
        Self {
            xi,
            best_xi: xi,
            best_epoch: 0,
            metrics: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    Init,
    Acquisition,
    Random,
}

/// One line of the trial ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub phase: TrialPhase,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub encoded: Vec<f64>,
    pub status: TrialStatus,
    pub xi: Option<f64>,
    pub best_xi: Option<f64>,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricReport>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn weights(&self) -> GroupWeights {
        GroupWeights {
            lambda: self.lambda.clone(),
            beta: self.beta.clone(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

#[derive(Debug, Clone)]
pub struct BoRun {
    pub records: Vec<TrialRecord>,
    /// Index into `records` of the trial with the largest `best_xi`.
    pub best: usize,
}

impl BoRun {
    pub fn best_record(&self) -> &TrialRecord {
        &self.records[self.best]
    }

    /// Best-so-far GP observation after each trial; `None` until a trial succeeds.
    pub fn incumbent_curve(&self) -> Vec<Option<f64>> {
        let mut cur: Option<f64> = None;
        self.records
            .iter()
            .map(|r| {
                if let Some(x) = r.xi.filter(|_| r.succeeded()) {
                    cur = Some(cur.map_or(x, |c: f64| c.max(x)));
                }
                cur
            })
            .collect()
    }

    pub fn write_ledger(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// The trial loop. The first `init_points` trials are Latin-hypercube points,
/// the rest maximize EI under a GP fitted to the successful trials so far.
/// A failed trial is recorded and left out of the GP; the run fails only if
/// every trial does.
pub fn run_bo<F>(space: SearchSpace, cfg: &BoConfig, mut train_fn: F) -> Result<BoRun>
where
    F: FnMut(usize, &GroupWeights) -> Result<TrialOutcome>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = latin_hypercube(cfg.init_points, space.dim(), &mut rng);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(cfg.trials);

    for t in 0..cfg.trials {
        let (z, phase) = if t < cfg.init_points {
            (init[t].clone(), TrialPhase::Init)
        } else {
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = records
                .iter()
                .filter_map(|r| r.xi.filter(|_| r.succeeded()).map(|x| (r.encoded.clone(), x)))
                .unzip();
            match gp_fit(&xs, &ys) {
                Ok(gp) => (propose_next(&gp, &mut rng), TrialPhase::Acquisition),
                Err(e) => {
                    warn!("trial {t}: no surrogate ({e}), sampling uniformly");
                    ((0..space.dim()).map(|_| rng.gen::<f64>()).collect(), TrialPhase::Random)
                }
            }
        };
        let weights = space.decode(&z);
        let mut record = TrialRecord {
            trial: t,
            phase,
            lambda: weights.lambda.clone(),
            beta: weights.beta.clone(),
            encoded: z,
            status: TrialStatus::Failed,
            xi: None,
            best_xi: None,
            best_epoch: None,
            metrics: None,
            checkpoint: None,
            error: None,
        };
        match train_fn(t, &weights) {
            Ok(out) if out.xi.is_finite() && out.best_xi.is_finite() => {
                info!("trial {t}: xi {:.5} (best epoch {} xi {:.5})", out.xi, out.best_epoch, out.best_xi);
                record.status = TrialStatus::Ok;
                record.xi = Some(out.xi);
                record.best_xi = Some(out.best_xi);
                record.best_epoch = Some(out.best_epoch);
                record.metrics = out.metrics;
                record.checkpoint = out.checkpoint;
            }
            Ok(out) => {
                warn!("trial {t}: non-finite xi {}", out.xi);
                record.error = Some(format!("non-finite xi {}", out.xi));
            }
            Err(e) => {
                warn!("trial {t} failed: {e}");
                record.error = Some(e.to_string());
            }
        }
        records.push(record);
    }

    let best = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.best_xi.filter(|_| r.succeeded()).map(|x| (i, x)))
        .fold(None, |acc: Option<(usize, f64)>, (i, x)| match acc {
            Some((_, bx)) if bx >= x => acc,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
        .ok_or(Error::NoSuccessfulTrials)?;
    Ok(BoRun { records, best })
}
