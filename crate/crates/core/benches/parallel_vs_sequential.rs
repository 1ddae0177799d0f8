//! Forecasting and trajectory MMD on a one-thread rayon pool against the
//! default pool. Build with `--no-default-features` to measure the plain
//! iterator fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use trajcast::aleatoric::train_residual_cvae;
use trajcast::config::ExperimentConfig;
use trajcast::ensemble::train_ensemble;
use trajcast::env::{generate_dataset, EnvId};
use trajcast::forecast::{forecast, ActionPlan};
use trajcast::metrics::{trajectory_mmd, BandwidthRule};
use trajcast::numeric::RngStream;

const SAMPLES: usize = 256;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    vec![("sequential", pool(1)), ("parallel", pool(threads))]
}

fn bench(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::minimal(EnvId::DroneLite);
    cfg.env.horizon = 40;
    let data = generate_dataset(&cfg.env, cfg.policy, cfg.data.n_train_low_epistemic, 1).unwrap();
    let m = &cfg.models;
    let arch = m.ensemble.arch(data.state_dim(), data.action_dim());
    let ens = train_ensemble(&data, 4, &arch, &m.ensemble.train, 2).unwrap();
    let cvae = train_residual_cvae(&data, &ens, &m.residual_vae, 3).unwrap();
    let s0 = data.trajectories[0].states[0].clone();
    let plan = ActionPlan::Fixed(data.trajectories[0].actions.clone());
    let rng = RngStream::new(4, 0);
    let bundle = forecast(&ens, &cvae, &s0, &plan, SAMPLES, &rng).unwrap();

    let mut g = c.benchmark_group("forecast");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new(name, SAMPLES), &pool, |b, pool| {
            b.iter(|| pool.install(|| forecast(&ens, &cvae, &s0, &plan, SAMPLES, &rng).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("trajectory_mmd");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new(name, SAMPLES), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| trajectory_mmd(&bundle, &data.trajectories, BandwidthRule::MedianHeuristic, 0).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
