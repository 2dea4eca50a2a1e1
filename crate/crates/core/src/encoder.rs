//! User/item embeddings, score functions and per-user parameter views.
//!
//! Two encoders share one parameter set: matrix factorization scores with the
//! raw rows, LightGCN scores with rows propagated over the training graph.
//! Losses are differentiated with respect to the *effective* (scored) rows and
//! [`Encoder::base_gradient`] maps that back onto the stored parameters.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mf,
    LightGcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    /// Propagation depth; LightGCN only.
    pub num_layers: usize,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mf,
            dim: 64,
            num_layers: 2,
            init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if self.kind == EncoderKind::LightGcn && self.num_layers == 0 {
            return Err(Error::InvalidInput("LightGCN needs at least one layer".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidInput("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Read access to user and item rows.
pub trait Embeddings: Sync {
    fn dim(&self) -> usize;
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    fn user(&self, u: usize) -> &[f64];
    fn item(&self, j: usize) -> &[f64];
}

/// Dot-product score with index checks.
pub fn score(emb: &dyn Embeddings, user: usize, item: usize) -> Result<f64> {
    if user >= emb.num_users() {
        return Err(Error::OutOfRange {
            what: "user",
            index: user,
            limit: emb.num_users(),
        });
    }
    if item >= emb.num_items() {
        return Err(Error::OutOfRange {
            what: "item",
            index: item,
            limit: emb.num_items(),
        });
    }
    Ok(crate::dot(emb.user(user), emb.item(item)))
}

/// User matrix `U` (|U|×d) and item matrix `V` (|V|×d), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            dim,
            num_users,
            num_items,
            users: vec![0.0; num_users * dim],
            items: vec![0.0; num_items * dim],
        }
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.items[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// `self += scale * grad`.
    pub fn add_scaled(&mut self, grad: &BaseGrad, scale: f64) {
        match grad {
            BaseGrad::Sparse(rows) => {
                for (&u, g) in &rows.users {
                    axpy(self.user_mut(u), scale, g);
                }
                for (&j, g) in &rows.items {
                    axpy(self.item_mut(j), scale, g);
                }
            }
            BaseGrad::Dense(g) => {
                axpy(&mut self.users, scale, &g.users);
                axpy(&mut self.items, scale, &g.items);
            }
        }
    }
}

impl Embeddings for ModelParams {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_users(&self) -> usize {
        self.num_users
    }
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }
    fn item(&self, j: usize) -> &[f64] {
        &self.items[j * self.dim..(j + 1) * self.dim]
    }
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Entries i.i.d. `Normal(0, init_scale²)`, deterministic in `seed`.
pub fn init_params(
    config: &EncoderConfig,
    num_users: usize,
    num_items: usize,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    if num_users == 0 || num_items == 0 {
        return Err(Error::InvalidInput("need at least one user and one item".into()));
    }
    let mut p = ModelParams::zeros(num_users, num_items, config.dim);
    if config.init_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for x in p.users.iter_mut().chain(p.items.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Gradient rows keyed by index. Ordered maps keep accumulation order fixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrad {
    pub users: BTreeMap<usize, Vec<f64>>,
    pub items: BTreeMap<usize, Vec<f64>>,
}

impl RowGrad {
    pub fn add_user(&mut self, u: usize, scale: f64, v: &[f64]) {
        let row = self.users.entry(u).or_insert_with(|| vec![0.0; v.len()]);
        axpy(row, scale, v);
    }

    pub fn add_item(&mut self, j: usize, scale: f64, v: &[f64]) {
        let row = self.items.entry(j).or_insert_with(|| vec![0.0; v.len()]);
        axpy(row, scale, v);
    }

    pub fn merge(&mut self, other: &RowGrad, scale: f64) {
        for (&u, g) in &other.users {
            self.add_user(u, scale, g);
        }
        for (&j, g) in &other.items {
            self.add_item(j, scale, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users.values().chain(self.items.values()).flatten().all(|x| x.is_finite())
    }
}

/// Gradient with respect to stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseGrad {
    Sparse(RowGrad),
    Dense(ModelParams),
}

/// Symmetrically normalized adjacency over the joint node set
/// (users `0..U`, items `U..U+V`). Edge weight is `1/sqrt(deg_a * deg_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    /// User–item graph from training positives; repeated pairs count once.
    pub fn bipartite(num_users: usize, num_items: usize, train: &[Interaction]) -> Self {
        let edges: Vec<(usize, usize)> = train
            .iter()
            .map(|it| (it.user, num_users + it.item))
            .collect();
        Self::from_node_edges(num_users, num_items, &edges)
    }

    /// Undirected graph over joint node indices. A self-loop `(a, a)` adds one
    /// to the degree of `a`.
    pub fn from_node_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let n = num_users + num_items;
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            nbrs[a].push(b);
            if a != b {
                nbrs[b].push(a);
            }
        }
        for v in &mut nbrs {
            v.sort_unstable();
            v.dedup();
        }
        let deg: Vec<f64> = nbrs.iter().map(|v| v.len() as f64).collect();
        let rows = nbrs
            .iter()
            .enumerate()
            .map(|(a, v)| v.iter().map(|&b| (b, 1.0 / (deg[a] * deg[b]).sqrt())).collect())
            .collect();
        Self {
            num_users,
            num_items,
            rows,
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64], dim: usize) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (a, row) in self.rows.iter().enumerate() {
            let dst = &mut out[a * dim..(a + 1) * dim];
            for &(b, w) in row {
                axpy(dst, w, &input[b * dim..(b + 1) * dim]);
            }
        }
    }
}

/// Mean of layers `0..=layers` of `e⁽ˡ⁺¹⁾ = Â e⁽ˡ⁾`. The operator is symmetric,
/// so the same call maps output gradients back to input gradients.
pub fn propagate(params: &ModelParams, adj: &NormalizedAdjacency, layers: usize) -> ModelParams {
    assert_eq!(
        (params.num_users, params.num_items),
        (adj.num_users, adj.num_items),
        "adjacency shape mismatch"
    );
    let d = params.dim;
    let mut cur: Vec<f64> = params.users.iter().chain(&params.items).copied().collect();
    let mut acc = cur.clone();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..layers {
        adj.apply(&cur, &mut next, d);
        axpy(&mut acc, 1.0, &next);
        std::mem::swap(&mut cur, &mut next);
    }
    let inv = 1.0 / (layers as f64 + 1.0);
    acc.iter_mut().for_each(|x| *x *= inv);
    let items = acc.split_off(params.num_users * d);
    ModelParams {
        dim: d,
        num_users: params.num_users,
        num_items: params.num_items,
        users: acc,
        items,
    }
}

/// An encoder configuration bound to the training graph it needs.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    graph: Option<Arc<NormalizedAdjacency>>,
}

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        num_users: usize,
        num_items: usize,
        train: &[Interaction],
    ) -> Result<Self> {
        config.validate()?;
        let graph = match config.kind {
            EncoderKind::Mf => None,
            EncoderKind::LightGcn => Some(Arc::new(NormalizedAdjacency::bipartite(
                num_users, num_items, train,
            ))),
        };
        Ok(Self { config, graph })
    }

    pub fn with_graph(config: EncoderConfig, graph: NormalizedAdjacency) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            graph: Some(Arc::new(graph)),
        })
    }

    pub fn is_mf(&self) -> bool {
        self.config.kind == EncoderKind::Mf
    }

    /// The rows that are actually scored.
    pub fn effective<'a>(&self, params: &'a ModelParams) -> Cow<'a, ModelParams> {
        match (&self.config.kind, &self.graph) {
            (EncoderKind::LightGcn, Some(g)) => {
                Cow::Owned(propagate(params, g, self.config.num_layers))
            }
            _ => Cow::Borrowed(params),
        }
    }

    pub fn score(&self, params: &ModelParams, user: usize, item: usize) -> Result<f64> {
        score(self.effective(params).as_ref(), user, item)
    }

    /// Maps a gradient on effective rows to a gradient on stored parameters.
    pub fn base_gradient(&self, rows: RowGrad, shape: &ModelParams) -> BaseGrad {
        match (&self.config.kind, &self.graph) {
            (EncoderKind::LightGcn, Some(g)) => {
                let mut dense = ModelParams::zeros(shape.num_users, shape.num_items, shape.dim);
                for (u, row) in rows.users {
                    axpy(dense.user_mut(u), 1.0, &row);
                }
                for (j, row) in rows.items {
                    axpy(dense.item_mut(j), 1.0, &row);
                }
                BaseGrad::Dense(propagate(&dense, g, self.config.num_layers))
            }
            _ => BaseGrad::Sparse(rows),
        }
    }

    /// Runs `f` on the effective embeddings of `base` with the view's rows
    /// replaced by `values`.
    pub fn with_view<R>(
        &self,
        base: &ModelParams,
        view: &ParamView,
        values: &[f64],
        f: impl FnOnce(&dyn Embeddings) -> R,
    ) -> R {
        let overlay = ViewOverlay::new(base, view, values);
        if self.is_mf() {
            f(&overlay)
        } else {
            let mut full = base.clone();
            view.scatter(&mut full, values);
            f(self.effective(&full).as_ref())
        }
    }
}

/// `Θ_i`: one user row plus a sorted set of item rows, flattened as
/// `[user row, item rows in ascending item id]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamView {
    user: usize,
    items: Vec<usize>,
    dim: usize,
}

impl ParamView {
    /// Duplicate scope entries are dropped.
    pub fn new(
        params: &ModelParams,
        user: usize,
        scope: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if user >= params.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: user,
                limit: params.num_users,
            });
        }
        let mut items: Vec<usize> = scope.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::InvalidInput("parameter view needs a non-empty item scope".into()));
        }
        if let Some(&j) = items.last().filter(|&&j| j >= params.num_items) {
            return Err(Error::OutOfRange {
                what: "item",
                index: j,
                limit: params.num_items,
            });
        }
        Ok(Self {
            user,
            items,
            dim: params.dim,
        })
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dim * (1 + self.items.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of item `j`'s block in the flattened vector.
    pub fn item_offset(&self, j: usize) -> Option<usize> {
        self.items
            .binary_search(&j)
            .ok()
            .map(|k| self.dim * (1 + k))
    }

    pub fn gather(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(params.user(self.user));
        for &j in &self.items {
            out.extend_from_slice(params.item(j));
        }
        out
    }

    pub fn scatter(&self, params: &mut ModelParams, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "view length mismatch");
        let d = self.dim;
        params.user_mut(self.user).copy_from_slice(&values[..d]);
        for (k, &j) in self.items.iter().enumerate() {
            params
                .item_mut(j)
                .copy_from_slice(&values[d * (1 + k)..d * (2 + k)]);
        }
    }

    /// Flattens a parameter gradient into view coordinates. When `strict`,
    /// a non-zero gradient row outside the view is an error; otherwise such
    /// rows are dropped.
    pub fn flatten(&self, grad: &BaseGrad, strict: bool) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut out = vec![0.0; self.len()];
        match grad {
            BaseGrad::Sparse(rows) => {
                for (&u, g) in &rows.users {
                    if u == self.user {
                        axpy(&mut out[..d], 1.0, g);
                    } else if strict && g.iter().any(|&x| x != 0.0) {
                        return Err(Error::MissingParameter(format!("user row {u}")));
                    }
                }
                for (&j, g) in &rows.items {
                    match self.item_offset(j) {
                        Some(off) => axpy(&mut out[off..off + d], 1.0, g),
                        None if strict && g.iter().any(|&x| x != 0.0) => {
                            return Err(Error::MissingParameter(format!("item row {j}")))
                        }
                        None => {}
                    }
                }
            }
            BaseGrad::Dense(g) => {
                out[..d].copy_from_slice(g.user(self.user));
                for (k, &j) in self.items.iter().enumerate() {
                    out[d * (1 + k)..d * (2 + k)].copy_from_slice(g.item(j));
                }
            }
        }
        Ok(out)
    }
}

/// Base parameters with a view's rows overridden.
pub struct ViewOverlay<'a> {
    base: &'a ModelParams,
    view: &'a ParamView,
    values: &'a [f64],
}

impl<'a> ViewOverlay<'a> {
    pub fn new(base: &'a ModelParams, view: &'a ParamView, values: &'a [f64]) -> Self {
        assert_eq!(values.len(), view.len(), "view length mismatch");
        Self { base, view, values }
    }
}

impl Embeddings for ViewOverlay<'_> {
    fn dim(&self) -> usize {
        self.base.dim
    }
    fn num_users(&self) -> usize {
        self.base.num_users
    }
    fn num_items(&self) -> usize {
        self.base.num_items
    }
    fn user(&self, u: usize) -> &[f64] {
        if u == self.view.user {
            &self.values[..self.base.dim]
        } else {
            self.base.user(u)
        }
    }
    fn item(&self, j: usize) -> &[f64] {
        match self.view.item_offset(j) {
            Some(off) => &self.values[off..off + self.base.dim],
            None => self.base.item(j),
        }
    }
}

/// Parameters plus everything needed to rebuild the encoder around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    /// JSON document; floats round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize) -> EncoderConfig {
        EncoderConfig {
            dim,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(&cfg(64), 100, 200, 5).unwrap();
        let b = init_params(&cfg(64), 100, 200, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.users.len(), 100 * 64);
        assert_eq!(a.items.len(), 200 * 64);
        let c = init_params(&cfg(64), 100, 200, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_scale_is_zero() {
        let mut c = cfg(4);
        c.init_scale = 0.0;
        let p = init_params(&c, 3, 5, 1).unwrap();
        assert!(p.users.iter().chain(&p.items).all(|&x| x == 0.0));
    }

    #[test]
    fn score_cases() {
        let mut p = ModelParams::zeros(2, 2, 2);
        assert_eq!(score(&p, 0, 1).unwrap(), 0.0);
        p.user_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.item_mut(0).copy_from_slice(&[0.0, 1.0]);
        assert_eq!(score(&p, 0, 0).unwrap(), 0.0);
        p.user_mut(1).copy_from_slice(&[1.0, 2.0]);
        p.item_mut(1).copy_from_slice(&[1.0, 2.0]);
        assert_eq!(score(&p, 1, 1).unwrap(), 5.0);
        assert!(matches!(score(&p, 2, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(score(&p, 0, 9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn score_scales_with_user_row() {
        let p = init_params(&cfg(5), 2, 3, 11).unwrap();
        let base = score(&p, 1, 2).unwrap();
        let mut q = p.clone();
        q.user_mut(1).iter_mut().for_each(|x| *x *= -2.5);
        assert!((score(&q, 1, 2).unwrap() + 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn self_loops_are_identity() {
        let p = init_params(&cfg(3), 2, 3, 1).unwrap();
        let edges: Vec<_> = (0..5).map(|a| (a, a)).collect();
        let adj = NormalizedAdjacency::from_node_edges(2, 3, &edges);
        let out = propagate(&p, &adj, 3);
        for (a, b) in out.users.iter().chain(&out.items).zip(p.users.iter().chain(&p.items)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_edge_propagation() {
        let mut p = ModelParams::zeros(1, 1, 2);
        p.user_mut(0).copy_from_slice(&[1.0, 3.0]);
        p.item_mut(0).copy_from_slice(&[5.0, -1.0]);
        let adj = NormalizedAdjacency::from_node_edges(1, 1, &[(0, 1)]);
        let out = propagate(&p, &adj, 1);
        assert_eq!(out.user(0), &[3.0, 1.0]);
        assert_eq!(out.item(0), &[3.0, 1.0]);
    }

    #[test]
    fn isolated_node_keeps_layer_zero_share() {
        let mut p = ModelParams::zeros(2, 1, 1);
        p.user_mut(0)[0] = 2.0;
        p.user_mut(1)[0] = 6.0;
        p.item_mut(0)[0] = 4.0;
        let adj = NormalizedAdjacency::from_node_edges(2, 1, &[(0, 2)]);
        let out = propagate(&p, &adj, 2);
        assert!((out.user(1)[0] - 6.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn propagation_is_linear() {
        let p = init_params(&cfg(3), 3, 4, 2).unwrap();
        let edges = [(0, 3), (0, 4), (1, 4), (2, 5), (2, 6), (1, 6)];
        let adj = NormalizedAdjacency::from_node_edges(3, 4, &edges);
        let mut scaled = p.clone();
        scaled.users.iter_mut().chain(scaled.items.iter_mut()).for_each(|x| *x *= -1.7);
        let a = propagate(&p, &adj, 2);
        let b = propagate(&scaled, &adj, 2);
        for (x, y) in a.users.iter().chain(&a.items).zip(b.users.iter().chain(&b.items)) {
            assert!((x * -1.7 - y).abs() < 1e-12);
        }
        let zero = ModelParams::zeros(3, 4, 3);
        let z = propagate(&zero, &adj, 2);
        assert!(z.users.iter().chain(&z.items).all(|&x| x == 0.0));
    }

    #[test]
    fn view_order_and_length() {
        let mut p = ModelParams::zeros(2, 4, 2);
        p.user_mut(1).copy_from_slice(&[9.0, 9.5]);
        p.item_mut(1).copy_from_slice(&[1.0, 1.5]);
        p.item_mut(3).copy_from_slice(&[3.0, 3.5]);
        let v = ParamView::new(&p, 1, [3, 1, 3]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.gather(&p), vec![9.0, 9.5, 1.0, 1.5, 3.0, 3.5]);
        assert!(ParamView::new(&p, 1, []).is_err());
    }

    #[test]
    fn view_write_through() {
        let mut p = init_params(&cfg(2), 2, 4, 3).unwrap();
        let v = ParamView::new(&p, 0, [1, 3]).unwrap();
        v.scatter(&mut p, &vec![0.0; v.len()]);
        assert!(p.user(0).iter().chain(p.item(1)).chain(p.item(3)).all(|&x| x == 0.0));
        assert!(p.item(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn disjoint_views_do_not_interfere() {
        let mut p = init_params(&cfg(2), 2, 4, 3).unwrap();
        let before = p.clone();
        let a = ParamView::new(&p, 0, [0, 1]).unwrap();
        let b = ParamView::new(&p, 1, [2, 3]).unwrap();
        a.scatter(&mut p, &vec![1.0; a.len()]);
        assert_eq!(b.gather(&p), b.gather(&before));
        b.scatter(&mut p, &vec![2.0; b.len()]);
        assert_eq!(a.gather(&p), vec![1.0; a.len()]);
    }

    #[test]
    fn view_identity_round_trip() {
        let mut p = init_params(&cfg(3), 3, 5, 8).unwrap();
        let before = p.clone();
        let v = ParamView::new(&p, 2, [4, 0, 2]).unwrap();
        let vals = v.gather(&p);
        v.scatter(&mut p, &vals);
        assert_eq!(p, before);
    }

    #[test]
    fn strict_flatten_names_missing_row() {
        let p = ModelParams::zeros(2, 4, 2);
        let v = ParamView::new(&p, 0, [1]).unwrap();
        let mut g = RowGrad::default();
        g.add_item(2, 1.0, &[1.0, 0.0]);
        match v.flatten(&BaseGrad::Sparse(g.clone()), true) {
            Err(Error::MissingParameter(s)) => assert!(s.contains("item row 2")),
            other => panic!("{other:?}"),
        }
        assert_eq!(v.flatten(&BaseGrad::Sparse(g), false).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ck = Checkpoint {
            config: cfg(3),
            seed: 42,
            params: init_params(&cfg(3), 4, 6, 42).unwrap(),
        };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
