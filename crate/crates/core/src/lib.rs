//! Group-personalized multi-objective recommender training.
//!
//! Users are clustered into groups by their behaviour statistics; every group
//! carries a pair of weights on the diversity and fairness losses. A Gaussian
//! process Bayesian optimizer searches those weights, and each candidate is
//! scored by a short first-order meta-learning run whose per-objective outer
//! gradients are de-conflicted by projection before they are applied.
//!
//! Module map:
//!
//! - [`dataset`]: CSV ingestion, binarization, filtering, chronological splits,
//!   support/query sets, negative sampling, synthetic data.
//! - [`encoder`]: embedding parameters, matrix factorization and LightGCN-style
//!   propagation, per-user parameter views.
//! - [`objectives`]: BPR, category-entropy and score-gap losses with analytic
//!   gradients, plus the group-weighted combined loss.
//! - [`metrics`]: top-K lists, NDCG/ILD/ARP, scalarizations, constraint penalty.
//! - [`grouping`]: user statistics and k-means clustering.
//! - [`metaopt`]: inner/outer meta-learning with projected gradients.
//! - [`bayesopt`]: Matérn-5/2 GP surrogate, expected improvement, the trial loop.
//! - [`harness`]: experiment configuration, ablation variants, grid search, reports.

pub mod bayesopt;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod grouping;
pub mod harness;
pub mod metaopt;
pub mod metrics;
pub mod objectives;
pub mod par;
pub mod training;

pub use error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
