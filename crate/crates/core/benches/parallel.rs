//! Parallel versus sequential execution of the two hot paths: full-catalog
//! evaluation and one meta-training epoch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use booml_core::dataset::Split;
use booml_core::encoder::init_params;
use booml_core::harness::{prepare, ExperimentConfig};
use booml_core::metaopt::{run_meta_training, MetaConfig, MetaVariant};
use booml_core::metrics::{evaluate, Constraints};
use booml_core::objectives::GroupWeights;
use booml_core::par;
use booml_core::training::Monitor;

fn bench(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let p = prepare(&cfg, 0).unwrap();
    let params = init_params(&cfg.encoder, p.dataset.num_users, p.dataset.num_items, 0).unwrap();
    let monitor = Monitor::new(&p.dataset, &p.encoder, &p.groups, cfg.eval).unwrap();
    let weights = GroupWeights::uniform(p.groups.num_groups(), 1.0, 1.0);
    let meta = MetaConfig {
        epochs: 1,
        ..MetaConfig::default()
    };

    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    for (label, on) in [("parallel", true), ("sequential", false)] {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("evaluate", label), |b| {
            b.iter(|| evaluate(&params, &p.dataset, Split::Test, &[10, 20], None, &Constraints::default()).unwrap())
        });
        group.bench_function(BenchmarkId::new("meta_epoch", label), |b| {
            b.iter(|| {
                run_meta_training(&monitor, params.clone(), &weights, &meta, MetaVariant::OrthoMeta, None).unwrap()
            })
        });
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
