use criterion::{criterion_group, criterion_main, Criterion};
use fbi_core::pipeline::{evaluate_policy, EvalConfig, FbiPolicy, PolicySpec, RunConfig};
use fbi_core::toyenv::{Task, ToyConfig};

fn policy() -> FbiPolicy {
    let mut cfg = RunConfig {
        env: ToyConfig { n_points: 64, material_points: 128, goal_points: 16, ..ToyConfig::default() },
        ..RunConfig::default()
    };
    cfg.policy.widths = vec![64, 128];
    cfg.policy.mid = 128;
    FbiPolicy::new(PolicySpec::from_run(&cfg), 0).expect("valid config")
}

fn batch_eval(c: &mut Criterion) {
    let policy = policy();
    let cfg = EvalConfig { episodes: 16, chunk: 4, ..EvalConfig::default() };
    let run = || evaluate_policy(&policy, Task::Push, &cfg, 0).expect("evaluation runs");
    let mut g = c.benchmark_group("batch_eval");
    g.sample_size(10);
    let label = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };
    g.bench_function(label, |b| b.iter(run));
    #[cfg(feature = "parallel")]
    {
        // The same build pinned to one worker, for a side-by-side number
        // without rebuilding under --no-default-features.
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
        g.bench_function("single_worker", |b| b.iter(|| single.install(run)));
    }
    g.finish();
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
