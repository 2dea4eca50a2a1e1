//! Experiment orchestration: configuration, the five ablation variants, grid
//! search and report files.
//!
//! Output layout of one run directory:
//!
//! ```text
//! <out>/<variant>_seed<seed>/result.json     RunResult
//! <out>/<variant>_seed<seed>/epochs.jsonl    one EpochLog per line, all trials
//! <out>/<variant>_seed<seed>/trials.jsonl    BO variants only
//! <out>/<variant>_seed<seed>/evaluate.csv    test metrics per K
//! <out>/<variant>_seed<seed>/groups.csv      user_id,group
//! <out>/<variant>_seed<seed>/checkpoint.json selected parameters
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayesopt::{run_bo, BoConfig, SearchSpace, TrialOutcome, TrialRecord};
use crate::dataset::synthetic::{generate, SyntheticConfig};
use crate::dataset::{ingest_csv, preprocess, ColumnMapping, Dataset, RawLog, Split, SplitRatios};
use crate::encoder::{init_params, Checkpoint, Encoder, EncoderConfig, ModelParams};
use crate::grouping::{cluster_users, compute_stats, GroupAssignment};
use crate::metaopt::{run_meta_training, MetaConfig, MetaVariant};
use crate::metrics::{self, MetricReport};
use crate::objectives::GroupWeights;
use crate::training::{train_sgd, EpochLog, EvalSpec, Monitor, SgdConfig, TrainOutcome, WeightMode};
use crate::{Error, Result};

pub const SEED_ENV: &str = "BOOML_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgd,
    Trainable,
    Bo,
    Boml,
    Booml,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Sgd, Variant::Trainable, Variant::Bo, Variant::Boml, Variant::Booml];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgd => "SGD",
            Variant::Trainable => "Trainable",
            Variant::Bo => "BO",
            Variant::Boml => "BOML",
            Variant::Booml => "BOOML",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Trainable => "trainable",
            Variant::Bo => "bo",
            Variant::Boml => "boml",
            Variant::Booml => "booml",
        }
    }

    pub fn uses_bo(self) -> bool {
        matches!(self, Variant::Bo | Variant::Boml | Variant::Booml)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}`")))
    }
}

/// Where the interactions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A dataset bundle written by `prep`.
    Bundle { path: PathBuf },
    /// A raw CSV log, preprocessed on load.
    Csv { path: PathBuf },
    /// Generated on load; its seed follows the run seed.
    Synthetic { config: SyntheticConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub min_interactions: usize,
    pub positive_threshold: f64,
    pub split: SplitRatios,
    pub support_fraction: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            min_interactions: 10,
            positive_threshold: 4.0,
            split: SplitRatios::default(),
            support_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Number of user groups `W`.
    pub groups: usize,
    /// Cut-offs reported on the test split.
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub dataset: DataSource,
    pub prep: PrepConfig,
    pub encoder: EncoderConfig,
    pub sgd: SgdConfig,
    pub meta: MetaConfig,
    pub bo: BoConfig,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Booml,
            groups: 3,
            ks: vec![10, 20],
            seeds: vec![0],
            out: None,
            dataset: DataSource::Synthetic {
                config: SyntheticConfig::desk(0),
            },
            prep: PrepConfig::default(),
            encoder: EncoderConfig::default(),
            sgd: SgdConfig::default(),
            meta: MetaConfig::default(),
            bo: BoConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Replaces the seed list with `BOOML_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    /// SHA-256 of the TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidInput("need at least one group".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidInput("ks must be non-empty and positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("need at least one seed".into()));
        }
        match &self.dataset {
            DataSource::Bundle { path } | DataSource::Csv { path } if !path.exists() => {
                return Err(Error::InvalidInput(format!("dataset path {} does not exist", path.display())));
            }
            _ => {}
        }
        self.encoder.validate()?;
        self.sgd.validate()?;
        self.meta.validate()?;
        self.bo.validate()
    }

    /// Copy with every component seed set from `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.sgd.seed = seed;
        c.meta.seed = seed;
        c.bo.seed = seed;
        c.eval.seed = seed;
        if let DataSource::Synthetic { config } = &mut c.dataset {
            config.seed = seed;
        }
        c
    }
}

/// A dataset with everything derived from it for one seed.
pub struct Prepared {
    pub dataset: Dataset,
    pub encoder: Encoder,
    pub groups: GroupAssignment,
    /// Planted population per user, for synthetic data.
    pub populations: Option<Vec<usize>>,
}

pub fn load_dataset(source: &DataSource, prep: &PrepConfig) -> Result<(Dataset, Option<Vec<usize>>)> {
    let (raw, population_of): (RawLog, Option<Vec<usize>>) = match source {
        DataSource::Bundle { path } => return Ok((Dataset::load(path)?, None)),
        DataSource::Csv { path } => (ingest_csv(path, &ColumnMapping::default())?, None),
        DataSource::Synthetic { config } => {
            let data = generate(config)?;
            (data.raw, Some(data.population_of))
        }
    };
    let pre = preprocess(&raw, prep.min_interactions, prep.positive_threshold)?;
    let dataset = Dataset::build(pre, prep.split, prep.support_fraction)?;
    let populations = population_of.map(|pop| {
        let raw_index: HashMap<&str, usize> =
            raw.user_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        dataset
            .user_labels
            .iter()
            .map(|l| pop[raw_index[l.as_str()]])
            .collect()
    });
    Ok((dataset, populations))
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let cfg = cfg.for_seed(seed);
    let (dataset, populations) = load_dataset(&cfg.dataset, &cfg.prep)?;
    let encoder = Encoder::new(cfg.encoder.clone(), dataset.num_users, dataset.num_items, &dataset.train)?;
    let groups = if cfg.groups == 1 {
        GroupAssignment::single(dataset.num_users)
    } else {
        cluster_users(&compute_stats(&dataset)?, cfg.groups, seed)?
    };
    Ok(Prepared {
        dataset,
        encoder,
        groups,
        populations,
    })
}

/// Learned weights and test metrics of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub users: usize,
    pub lambda: f64,
    pub beta: f64,
    /// `(1, λ, β) / (1 + λ + β)`.
    pub normalized: [f64; 3],
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    /// Test-split metrics of the selected parameters, one per K.
    pub reports: Vec<MetricReport>,
    /// Epochs trained by the selected run (the selected trial for BO variants).
    pub epochs: usize,
    pub best_epoch: usize,
    pub converged: bool,
    pub wall_ms: u64,
    pub weights: GroupWeights,
    pub groups: Vec<GroupRow>,
    /// Epoch logs of every run, trial by trial.
    pub log: Vec<EpochLog>,
    pub trials: Option<Vec<TrialRecord>>,
    pub selected_trial: Option<usize>,
}

impl RunResult {
    pub fn report_at(&self, k: usize) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.k == k)
    }

    pub fn dir_name(&self) -> String {
        format!("{}_seed{}", self.variant.slug(), self.seed)
    }
}

/// A finished run before it is written out.
pub struct VariantRun {
    pub result: RunResult,
    pub params: ModelParams,
    pub group_assignment: GroupAssignment,
    pub user_labels: Vec<String>,
    pub config: ExperimentConfig,
}

fn trial_outcome(out: &TrainOutcome) -> TrialOutcome {
    let best = out.best();
    TrialOutcome {
        xi: out.last().xi,
        best_xi: if out.best_epoch == 0 { out.last().xi } else { best.xi },
        best_epoch: out.best_epoch,
        metrics: None,
        checkpoint: None,
    }
}

fn selected_params(out: &TrainOutcome) -> &ModelParams {
    if out.best_epoch == 0 {
        &out.params
    } else {
        &out.best_params
    }
}

fn test_reports(
    p: &Prepared,
    params: &ModelParams,
    ks: &[usize],
    users: Option<&[usize]>,
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricReport>> {
    let eff = p.encoder.effective(params);
    metrics::evaluate(eff.as_ref(), &p.dataset, Split::Test, ks, users, &cfg.eval.constraints)
}

fn group_rows(p: &Prepared, params: &ModelParams, weights: &GroupWeights, cfg: &ExperimentConfig) -> Result<Vec<GroupRow>> {
    (0..p.groups.num_groups())
        .map(|g| {
            let members = p.groups.members(g);
            let report = if members.is_empty() {
                None
            } else {
                test_reports(p, params, &[cfg.eval.k], Some(&members), cfg)
                    .ok()
                    .and_then(|r| r.into_iter().next())
            };
            Ok(GroupRow {
                group: g,
                users: members.len(),
                lambda: weights.lambda[g],
                beta: weights.beta[g],
                normalized: weights.normalized(g),
                report,
            })
        })
        .collect()
}

/// Runs one variant for one seed on an already prepared dataset.
pub fn run_prepared(cfg: &ExperimentConfig, seed: u64, p: &Prepared) -> Result<VariantRun> {
    let cfg = cfg.for_seed(seed);
    cfg.validate()?;
    let hash = cfg.hash()?;
    let monitor = Monitor::new(&p.dataset, &p.encoder, &p.groups, cfg.eval)?;
    let init = init_params(&cfg.encoder, p.dataset.num_users, p.dataset.num_items, seed)?;
    let w = p.groups.num_groups();
    let start = Instant::now();
    info!("{} seed {seed}: {} users, {} items, {w} groups", cfg.variant, p.dataset.num_users, p.dataset.num_items);

    let (params, weights, log, epochs, best_epoch, converged, trials, selected) = match cfg.variant {
        Variant::Sgd | Variant::Trainable => {
            let (mode, fixed) = if cfg.variant == Variant::Sgd {
                let g = GroupWeights::uniform(w, 1.0, 1.0);
                (WeightMode::Fixed(g.clone()), Some(g))
            } else {
                (WeightMode::Trainable { groups: w }, None)
            };
            let out = train_sgd(&monitor, init, &mode, &cfg.sgd, None)?;
            let last = out.last();
            let weights = fixed.unwrap_or_else(|| GroupWeights {
                lambda: last.lambda.clone(),
                beta: last.beta.clone(),
            });
            let params = selected_params(&out).clone();
            (params, weights, out.log.clone(), out.epochs(), out.best_epoch, out.converged, None, None)
        }
        Variant::Bo | Variant::Boml | Variant::Booml => {
            let space = SearchSpace::new(w)?;
            let mut log = Vec::new();
            let mut best: Option<(f64, ModelParams, usize, usize, bool)> = None;
            let run = run_bo(space, &cfg.bo, |t, weights| {
                let out = match cfg.variant {
                    Variant::Bo => train_sgd(&monitor, init.clone(), &WeightMode::Fixed(weights.clone()), &cfg.sgd, Some(t))?,
                    Variant::Boml => run_meta_training(&monitor, init.clone(), weights, &cfg.meta, MetaVariant::Meta, Some(t))?,
                    _ => run_meta_training(&monitor, init.clone(), weights, &cfg.meta, MetaVariant::OrthoMeta, Some(t))?,
                };
                log.extend(out.log.iter().cloned());
                let o = trial_outcome(&out);
                if best.as_ref().map_or(true, |b| o.best_xi > b.0) {
                    best = Some((o.best_xi, selected_params(&out).clone(), out.epochs(), out.best_epoch, out.converged));
                }
                Ok(o)
            })?;
            let (_, params, epochs, best_epoch, converged) = best.ok_or(Error::NoSuccessfulTrials)?;
            let mut records = run.records.clone();
            let sel = run.best;
            records[sel].checkpoint = Some("checkpoint.json".into());
            let weights = run.best_record().weights();
            (params, weights, log, epochs, best_epoch, converged, Some(records), Some(sel))
        }
    };

    let reports = test_reports(p, &params, &cfg.ks, None, &cfg)?;
    let groups = group_rows(p, &params, &weights, &cfg)?;
    let mut trials = trials;
    if let (Some(records), Some(sel)) = (trials.as_mut(), selected) {
        records[sel].metrics = test_reports(p, &params, &[cfg.eval.k], None, &cfg)?.into_iter().next();
    }
    let result = RunResult {
        variant: cfg.variant,
        seed,
        config_hash: hash,
        reports,
        epochs,
        best_epoch,
        converged,
        wall_ms: start.elapsed().as_millis() as u64,
        weights,
        groups,
        log,
        trials,
        selected_trial: selected,
    };
    Ok(VariantRun {
        result,
        params,
        group_assignment: p.groups.clone(),
        user_labels: p.dataset.user_labels.clone(),
        config: cfg,
    })
}

pub fn run_variant(cfg: &ExperimentConfig, seed: u64) -> Result<VariantRun> {
    let p = prepare(cfg, seed)?;
    run_prepared(cfg, seed, &p)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

pub const EVALUATE_HEADER: [&str; 10] = ["method", "k", "ndcg", "ild", "arp", "res_sum", "har_mean", "penalty", "xi", "users"];

/// One row per `(method, K)`.
pub fn write_evaluate_csv(path: &Path, rows: &[(String, MetricReport)], mode: metrics::ScalarMode) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(EVALUATE_HEADER).map_err(&err)?;
    for (method, r) in rows {
        w.write_record([
            method.clone(),
            r.k.to_string(),
            fmt_f(r.ndcg),
            fmt_f(r.ild),
            fmt_f(r.arp),
            fmt_f(r.res_sum),
            fmt_f(r.har_mean),
            fmt_f(r.constraint_penalty),
            fmt_f(r.xi(mode)),
            r.users.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes a run into `<out>/<variant>_seed<seed>/` and returns that directory.
pub fn write_run(run: &VariantRun, out: &Path) -> Result<PathBuf> {
    let dir = out.join(run.result.dir_name());
    create_dir(&dir)?;
    write_text(&dir.join("result.json"), &serde_json::to_string_pretty(&run.result)?)?;
    write_jsonl(&dir.join("epochs.jsonl"), &run.result.log)?;
    if let Some(trials) = &run.result.trials {
        write_jsonl(&dir.join("trials.jsonl"), trials)?;
    }
    let rows: Vec<(String, MetricReport)> =
        run.result.reports.iter().map(|r| (run.result.variant.name().to_string(), *r)).collect();
    write_evaluate_csv(&dir.join("evaluate.csv"), &rows, run.config.eval.mode)?;
    run.group_assignment.write_csv(dir.join("groups.csv"), &run.user_labels)?;
    Checkpoint {
        config: run.config.encoder.clone(),
        seed: run.result.seed,
        params: run.params.clone(),
    }
    .save(dir.join("checkpoint.json"))?;
    run.config.save(dir.join("config.toml"))?;
    Ok(dir)
}

/// Enough to re-run a CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub parallel: bool,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.into(),
            args,
            config_hash: None,
            seeds: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::enabled(),
            files: Vec::new(),
        }
    }

    /// Lists every file under `out` (except the manifest) and writes `manifest.json`.
    pub fn write(mut self, out: &Path) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect_files(out, out, &mut files)?;
        files.retain(|f| f != "manifest.json");
        files.sort();
        self.files = files;
        let path = out.join("manifest.json");
        write_text(&path, &serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}

fn collect_files(root: &Path, dir: &Path, acc: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, acc)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            acc.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// One cell of the `(λ, β)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub beta: f64,
    pub report: Option<MetricReport>,
    pub epochs: usize,
    pub error: Option<String>,
}

pub const DEFAULT_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];

/// One SGD training per `(λ, β)` with the same weights for every user.
/// Failing cells are kept with their error.
pub fn grid_search(cfg: &ExperimentConfig, seed: u64, lambdas: &[f64], betas: &[f64]) -> Result<Vec<GridCell>> {
    if lambdas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidInput("grid axes must be non-empty".into()));
    }
    let mut cfg = cfg.for_seed(seed);
    cfg.groups = 1;
    cfg.validate()?;
    let p = prepare(&cfg, seed)?;
    let monitor = Monitor::new(&p.dataset, &p.encoder, &p.groups, cfg.eval)?;
    let init = init_params(&cfg.encoder, p.dataset.num_users, p.dataset.num_items, seed)?;
    let mut cells = Vec::with_capacity(lambdas.len() * betas.len());
    for &lambda in lambdas {
        for &beta in betas {
            let weights = GroupWeights::new(vec![lambda], vec![beta])?;
            let res = train_sgd(&monitor, init.clone(), &WeightMode::Fixed(weights), &cfg.sgd, None).and_then(|out| {
                let r = test_reports(&p, selected_params(&out), &[cfg.eval.k], None, &cfg)?;
                Ok((r[0], out.epochs()))
            });
            cells.push(match res {
                Ok((report, epochs)) => GridCell {
                    lambda,
                    beta,
                    report: Some(report),
                    epochs,
                    error: None,
                },
                Err(e) => GridCell {
                    lambda,
                    beta,
                    report: None,
                    epochs: 0,
                    error: Some(e.to_string()),
                },
            });
            info!("grid cell lambda={lambda} beta={beta} done");
        }
    }
    Ok(cells)
}

/// Indices of the best cell per metric: highest NDCG, highest ILD, lowest ARP.
pub fn grid_argmax(cells: &[GridCell]) -> [Option<usize>; 3] {
    let pick = |key: &dyn Fn(&MetricReport) -> f64| {
        cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.report.as_ref().map(|r| (i, key(r))))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    };
    [pick(&|r| r.ndcg), pick(&|r| r.ild), pick(&|r| -r.arp)]
}

pub fn write_grid_csv(path: &Path, cells: &[GridCell]) -> Result<()> {
    let best = grid_argmax(cells);
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["lambda", "beta", "ndcg", "ild", "arp", "res_sum", "har_mean", "epochs", "best", "error"])
        .map_err(&err)?;
    for (i, c) in cells.iter().enumerate() {
        let marks: Vec<&str> = ["ndcg", "ild", "arp"]
            .iter()
            .zip(best)
            .filter(|(_, b)| *b == Some(i))
            .map(|(m, _)| *m)
            .collect();
        let m = |f: fn(&MetricReport) -> f64| c.report.as_ref().map(|r| fmt_f(f(r))).unwrap_or_default();
        w.write_record([
            c.lambda.to_string(),
            c.beta.to_string(),
            m(|r| r.ndcg),
            m(|r| r.ild),
            m(|r| r.arp),
            m(|r| r.res_sum),
            m(|r| r.har_mean),
            c.epochs.to_string(),
            marks.join(";"),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The grid as a λ-by-β matrix per metric, best cells starred.
pub fn grid_table(cells: &[GridCell]) -> String {
    let best = grid_argmax(cells);
    let mut lambdas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for c in cells {
        if !lambdas.contains(&c.lambda) {
            lambdas.push(c.lambda);
        }
        if !betas.contains(&c.beta) {
            betas.push(c.beta);
        }
    }
    let mut s = String::new();
    for (mi, (name, f)) in [
        ("NDCG", (|r: &MetricReport| r.ndcg) as fn(&MetricReport) -> f64),
        ("ILD", |r: &MetricReport| r.ild),
        ("ARP", |r: &MetricReport| r.arp),
    ]
    .into_iter()
    .enumerate()
    {
        s.push_str(&format!("{name}\nlambda\\beta"));
        for b in &betas {
            s.push_str(&format!(",{b}"));
        }
        s.push('\n');
        for l in &lambdas {
            s.push_str(&l.to_string());
            for b in &betas {
                let cell = cells.iter().position(|c| c.lambda == *l && c.beta == *b);
                let text = match cell.and_then(|i| cells[i].report.as_ref().map(|r| (i, r))) {
                    Some((i, r)) => format!("{}{}", fmt_f(f(r)), if best[mi] == Some(i) { "*" } else { "" }),
                    None => "failed".into(),
                };
                s.push(',');
                s.push_str(&text);
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut out: Vec<RunResult> = files
        .iter()
        .filter(|f| f.ends_with("result.json"))
        .map(|f| {
            let path = dir.join(f);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| (a.variant, a.seed).cmp(&(b.variant, b.seed)));
    Ok(out)
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes `summary.csv`, `group_table.csv` and `plots/*.csv` for every
/// `result.json` under `results`. Returns the written paths.
pub fn report(results: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_results(results)?;
    if runs.is_empty() {
        return Err(Error::InvalidInput(format!("no result.json under {}", results.display())));
    }
    create_dir(out)?;
    let plots = out.join("plots");
    create_dir(&plots)?;
    let written = vec![
        write_summary(&out.join("summary.csv"), &runs)?,
        write_group_table(&out.join("group_table.csv"), &runs)?,
        write_loss_curves(&plots.join("loss_curves.csv"), &runs)?,
        write_weight_trajectories(&plots.join("weight_trajectories.csv"), &runs)?,
        write_incumbent_curves(&plots.join("bo_incumbent.csv"), &runs)?,
    ];
    Ok(written)
}

fn write_summary(path: &Path, runs: &[RunResult]) -> Result<PathBuf> {
    let mut cells: BTreeMap<(Variant, usize), Vec<(&MetricReport, usize)>> = BTreeMap::new();
    for r in runs {
        for m in &r.reports {
            cells.entry((r.variant, m.k)).or_default().push((m, r.epochs));
        }
    }
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let mut header = vec!["variant".to_string(), "k".into(), "runs".into()];
    for m in ["ndcg", "ild", "arp", "res_sum", "har_mean", "epochs"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(&err)?;
    for ((variant, k), rows) in cells {
        let mut rec = vec![variant.name().to_string(), k.to_string(), rows.len().to_string()];
        let cols: [fn(&(&MetricReport, usize)) -> f64; 6] = [
            |x| x.0.ndcg,
            |x| x.0.ild,
            |x| x.0.arp,
            |x| x.0.res_sum,
            |x| x.0.har_mean,
            |x| x.1 as f64,
        ];
        for f in cols {
            let vals: Vec<f64> = rows.iter().map(f).collect();
            let (m, s) = mean_std(&vals);
            rec.push(fmt_f(m));
            rec.push(fmt_f(s));
        }
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_group_table(path: &Path, runs: &[RunResult]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "variant", "seed", "group", "users", "lambda", "beta", "w_acc", "w_div", "w_fair", "k", "ndcg", "ild", "arp",
    ])
    .map_err(&err)?;
    for r in runs {
        for g in &r.groups {
            let m = |f: fn(&MetricReport) -> f64| g.report.as_ref().map(|x| fmt_f(f(x))).unwrap_or_default();
            w.write_record([
                r.variant.name().to_string(),
                r.seed.to_string(),
                format!("G{}", g.group + 1),
                g.users.to_string(),
                fmt_f(g.lambda),
                fmt_f(g.beta),
                fmt_f(g.normalized[0]),
                fmt_f(g.normalized[1]),
                fmt_f(g.normalized[2]),
                g.report.as_ref().map(|x| x.k.to_string()).unwrap_or_default(),
                m(|x| x.ndcg),
                m(|x| x.ild),
                m(|x| x.arp),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_loss_curves(path: &Path, runs: &[RunResult]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "variant", "seed", "trial", "epoch", "val_loss", "f_acc", "f_div", "f_fair", "ndcg", "ild", "arp", "xi",
    ])
    .map_err(&err)?;
    for r in runs {
        for l in &r.log {
            w.write_record([
                r.variant.name().to_string(),
                r.seed.to_string(),
                l.trial.map(|t| t.to_string()).unwrap_or_default(),
                l.epoch.to_string(),
                fmt_f(l.val_loss),
                fmt_f(l.objectives.accuracy),
                fmt_f(l.objectives.diversity),
                fmt_f(l.objectives.fairness),
                fmt_f(l.ndcg),
                fmt_f(l.ild),
                fmt_f(l.arp),
                fmt_f(l.xi),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_weight_trajectories(path: &Path, runs: &[RunResult]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["variant", "seed", "epoch", "group", "w_acc", "w_div", "w_fair"]).map_err(&err)?;
    for r in runs.iter().filter(|r| r.variant == Variant::Trainable) {
        for l in &r.log {
            for (g, n) in l.normalized.iter().enumerate() {
                w.write_record([
                    r.variant.name().to_string(),
                    r.seed.to_string(),
                    l.epoch.to_string(),
                    format!("G{}", g + 1),
                    fmt_f(n[0]),
                    fmt_f(n[1]),
                    fmt_f(n[2]),
                ])
                .map_err(&err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_incumbent_curves(path: &Path, runs: &[RunResult]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["variant", "seed", "trial", "status", "xi", "incumbent"]).map_err(&err)?;
    for r in runs {
        let Some(trials) = &r.trials else { continue };
        let mut inc: Option<f64> = None;
        for t in trials {
            if let Some(x) = t.xi.filter(|_| t.succeeded()) {
                inc = Some(inc.map_or(x, |c| c.max(x)));
            }
            w.write_record([
                r.variant.name().to_string(),
                r.seed.to_string(),
                t.trial.to_string(),
                if t.succeeded() { "ok".into() } else { "failed".to_string() },
                t.xi.map(fmt_f).unwrap_or_default(),
                inc.map(fmt_f).unwrap_or_default(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::Population;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut synth = SyntheticConfig::desk(0);
        synth.num_users = 60;
        synth.num_items = 120;
        synth.num_categories = 5;
        synth.populations = vec![Population {
            name: "mixed".into(),
            share: 1.0,
            categories: (1, 3),
            popularity_bias: 1.0,
            activity: (20, 30),
        }];
        let mut cfg = ExperimentConfig {
            groups: 2,
            ks: vec![5, 10],
            dataset: DataSource::Synthetic { config: synth },
            ..Default::default()
        };
        cfg.prep.min_interactions = 3;
        cfg.encoder.dim = 8;
        cfg.sgd.max_epochs = 3;
        cfg.meta.epochs = 2;
        cfg.bo.trials = 3;
        cfg.bo.init_points = 2;
        cfg.eval.k = 5;
        cfg.eval.sampling.candidates = 30;
        cfg.eval.sampling.fair_pairs = 64;
        cfg.sgd.sampling = cfg.eval.sampling;
        cfg.meta.sampling = cfg.eval.sampling;
        cfg
    }

    #[test]
    fn config_round_trip() {
        let cfg = tiny();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.slug().parse::<Variant>().unwrap(), v);
        }
        assert!("adam".parse::<Variant>().is_err());
    }

    #[test]
    fn for_seed_sets_every_seed() {
        let c = tiny().for_seed(42);
        assert_eq!((c.sgd.seed, c.meta.seed, c.bo.seed, c.eval.seed), (42, 42, 42, 42));
        match c.dataset {
            DataSource::Synthetic { config } => assert_eq!(config.seed, 42),
            _ => unreachable!(),
        }
    }

    #[test]
    fn normalized_weights_in_group_rows() {
        let w = GroupWeights::new(vec![1.0, 0.9724], vec![1.0, 4.7997]).unwrap();
        let n = w.normalized(0);
        assert!(n.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!((w.normalized(1)[0] - 0.1477).abs() < 5e-5);
        for g in 0..2 {
            assert!((w.normalized(g).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_mean_and_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sgd_variant_runs_and_reports() {
        let mut cfg = tiny();
        cfg.variant = Variant::Sgd;
        let run = run_variant(&cfg, 1).unwrap();
        assert!(run.result.trials.is_none());
        assert_eq!(run.result.reports.len(), 2);
        assert_eq!(run.result.groups.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let d = write_run(&run, dir.path()).unwrap();
        for f in ["result.json", "epochs.jsonl", "evaluate.csv", "groups.csv", "checkpoint.json"] {
            assert!(d.join(f).exists(), "{f}");
        }
        assert!(!d.join("trials.jsonl").exists());
        let written = report(dir.path(), &dir.path().join("report")).unwrap();
        let summary = fs::read_to_string(&written[0]).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    #[test]
    fn grid_shape_and_markers() {
        let cfg = tiny();
        let cells = grid_search(&cfg, 0, &[0.1, 1.0], &[0.5]).unwrap();
        assert_eq!(cells.len(), 2);
        let best = grid_argmax(&cells);
        assert!(best.iter().all(|b| b.is_some()));
        let table = grid_table(&cells);
        assert_eq!(table.matches('*').count(), 3);
    }

    #[test]
    fn empty_report_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path(), &dir.path().join("r")).is_err());
    }
}
