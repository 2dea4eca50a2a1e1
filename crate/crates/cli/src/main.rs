use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use booml_core::dataset::synthetic::{generate, SyntheticConfig};
use booml_core::dataset::{ingest_csv, preprocess, write_csv, ColumnMapping, Dataset, Split};
use booml_core::encoder::{Checkpoint, Encoder};
use booml_core::harness::{
    self, grid_search, grid_table, prepare, run_prepared, write_evaluate_csv, write_grid_csv, write_run,
    DataSource, ExperimentConfig, Manifest, Variant, DEFAULT_GRID,
};
use booml_core::metrics::{evaluate, Constraints, ScalarMode};

#[derive(Parser)]
#[command(name = "booml", version, about = "Group-personalized multi-objective recommender training")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a CSV log and write a dataset bundle.
    Prep(PrepArgs),
    /// Generate a synthetic CSV log.
    Synth(SynthArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Bayesian optimization of the group weights.
    Tune(TuneArgs),
    /// SGD over a grid of global (lambda, beta).
    Grid(GridArgs),
    /// All five variants, then a report.
    Ablate(CommonArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Summaries and plot data from finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    /// Ratings at or above this count as positive.
    #[arg(long, default_value_t = 4.0)]
    threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    support_fraction: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    categories: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Three planted populations instead of one mixed population.
    #[arg(long)]
    planted: bool,
}

#[derive(Args, Clone)]
struct CommonArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML experiment configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset bundle (.json) or CSV log; the synthetic desk set when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seeds to run, comma separated. BOOML_SEED overrides the config, this overrides both.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "sgd")]
    variant: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum GMode {
    Ressum,
    Harmean,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "booml")]
    variant: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long, value_enum)]
    g_mode: Option<GMode>,
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset bundle (.json) or CSV log.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    ks: Vec<usize>,
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long, value_enum, default_value = "ressum")]
    g_mode: GMode,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        booml_core::par::set_enabled(false);
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    match cli.command {
        Command::Prep(a) => prep(a, args),
        Command::Synth(a) => synth(a, args),
        Command::Train(a) => {
            let variant: Variant = a.variant.parse()?;
            run(&a.common, "train", args, |c| c.variant = variant, false)
        }
        Command::Tune(a) => {
            let variant: Variant = a.variant.parse()?;
            if !variant.uses_bo() {
                bail!("tune needs a BO variant (bo, boml, booml), got {variant}");
            }
            run(
                &a.common,
                "tune",
                args,
                |c| {
                    c.variant = variant;
                    if let Some(t) = a.trials {
                        c.bo.trials = t;
                    }
                    if let Some(i) = a.init {
                        c.bo.init_points = i;
                    }
                    if let Some(g) = a.g_mode {
                        c.eval.mode = scalar_mode(g);
                    }
                    if let Some(k) = a.kappa {
                        c.eval.constraints.kappa = k;
                    }
                },
                false,
            )
        }
        Command::Grid(a) => grid(a, args),
        Command::Ablate(a) => run(&a, "ablate", args, |_| {}, true),
        Command::Evaluate(a) => evaluate_cmd(a, args),
        Command::Report(a) => {
            fs::create_dir_all(&a.out)?;
            for p in harness::report(&a.results, &a.out)? {
                info!("wrote {}", p.display());
            }
            Manifest::new("report", args).write(&a.out)?;
            Ok(())
        }
    }
}

fn scalar_mode(g: GMode) -> ScalarMode {
    match g {
        GMode::Ressum => ScalarMode::RescaledSum,
        GMode::Harmean => ScalarMode::HarmonicMean,
    }
}

fn data_source(path: &Path) -> DataSource {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        DataSource::Csv { path: path.to_path_buf() }
    } else {
        DataSource::Bundle { path: path.to_path_buf() }
    }
}

fn load_config(a: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(d) = &a.data {
        cfg.dataset = data_source(d);
    }
    if let Some(g) = a.groups {
        cfg.groups = g;
    }
    cfg.out = Some(a.out.clone());
    Ok(cfg)
}

fn run(
    a: &CommonArgs,
    command: &str,
    args: Vec<String>,
    adjust: impl FnOnce(&mut ExperimentConfig),
    all_variants: bool,
) -> Result<()> {
    let mut cfg = load_config(a)?;
    adjust(&mut cfg);
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    let variants: Vec<Variant> = if all_variants { Variant::ALL.to_vec() } else { vec![cfg.variant] };
    for &seed in &cfg.seeds {
        let prepared = prepare(&cfg, seed)?;
        for &v in &variants {
            let mut c = cfg.clone();
            c.variant = v;
            let r = run_prepared(&c, seed, &prepared).with_context(|| format!("{v} seed {seed}"))?;
            let dir = write_run(&r, &a.out)?;
            let at = r.result.report_at(c.eval.k).or(r.result.reports.last());
            if let Some(m) = at {
                info!(
                    "{v} seed {seed}: ndcg@{} {:.4} ild {:.4} arp {:.2} res_sum {:.4} epochs {} -> {}",
                    m.k,
                    m.ndcg,
                    m.ild,
                    m.arp,
                    m.res_sum,
                    r.result.epochs,
                    dir.display()
                );
            }
        }
    }
    if all_variants {
        harness::report(&a.out, &a.out.join("report"))?;
    }
    let mut m = Manifest::new(command, args);
    m.config_hash = Some(cfg.hash()?);
    m.seeds = cfg.seeds.clone();
    m.write(&a.out)?;
    Ok(())
}

fn grid(a: GridArgs, args: Vec<String>) -> Result<()> {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    fs::create_dir_all(&a.common.out)?;
    let lambdas = a.lambdas.unwrap_or_else(|| DEFAULT_GRID.to_vec());
    let betas = a.betas.unwrap_or_else(|| DEFAULT_GRID.to_vec());
    for &seed in &cfg.seeds {
        let cells = grid_search(&cfg, seed, &lambdas, &betas)?;
        let dir = a.common.out.join(format!("grid_seed{seed}"));
        fs::create_dir_all(&dir)?;
        write_grid_csv(&dir.join("grid.csv"), &cells)?;
        fs::write(dir.join("grid_table.csv"), grid_table(&cells))?;
        info!("grid seed {seed}: {} cells -> {}", cells.len(), dir.display());
    }
    cfg.save(a.common.out.join("config.toml"))?;
    let mut m = Manifest::new("grid", args);
    m.config_hash = Some(cfg.hash()?);
    m.seeds = cfg.seeds.clone();
    m.write(&a.common.out)?;
    Ok(())
}

fn prep(a: PrepArgs, args: Vec<String>) -> Result<()> {
    let raw = ingest_csv(&a.input, &ColumnMapping::default())?;
    let pre = preprocess(&raw, a.min_interactions, a.threshold)?;
    let ds = Dataset::build(pre, Default::default(), a.support_fraction)?;
    fs::create_dir_all(&a.out)?;
    ds.save(a.out.join("dataset.json"))?;
    info!(
        "{} users, {} items, {} train / {} validation / {} test",
        ds.num_users,
        ds.num_items,
        ds.train.len(),
        ds.validation.len(),
        ds.test.len()
    );
    Manifest::new("prep", args).write(&a.out)?;
    Ok(())
}

fn synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let base = if a.planted { SyntheticConfig::planted(a.seed) } else { SyntheticConfig::desk(a.seed) };
    let cfg = SyntheticConfig {
        num_users: a.users,
        num_items: a.items,
        num_categories: a.categories,
        ..base
    };
    let data = generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    write_csv(&data.raw, a.out.join("interactions.csv"))?;
    let mut w = csv::Writer::from_path(a.out.join("populations.csv"))?;
    w.write_record(["user_id", "population"])?;
    for (u, &p) in data.population_of.iter().enumerate() {
        w.write_record([data.raw.user_labels[u].as_str(), cfg.populations[p].name.as_str()])?;
    }
    w.flush()?;
    fs::write(a.out.join("synthetic.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut m = Manifest::new("synth", args);
    m.seeds = vec![a.seed];
    m.write(&a.out)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, args: Vec<String>) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (ds, _) = harness::load_dataset(&data_source(&a.data), &Default::default())?;
    if ck.params.num_users != ds.num_users || ck.params.num_items != ds.num_items {
        bail!(
            "checkpoint is {}x{} but the dataset has {} users and {} items",
            ck.params.num_users,
            ck.params.num_items,
            ds.num_users,
            ds.num_items
        );
    }
    let enc = Encoder::new(ck.config.clone(), ds.num_users, ds.num_items, &ds.train)?;
    let eff = enc.effective(&ck.params);
    let reports = evaluate(eff.as_ref(), &ds, Split::Test, &a.ks, None, &Constraints::default())?;
    fs::create_dir_all(&a.out)?;
    let rows: Vec<_> = reports.into_iter().map(|r| (a.method.clone(), r)).collect();
    write_evaluate_csv(&a.out.join("evaluate.csv"), &rows, scalar_mode(a.g_mode))?;
    let mut m = Manifest::new("evaluate", args);
    m.seeds = vec![ck.seed];
    m.write(&a.out)?;
    Ok(())
}
