use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pilot_bench::EpochFixture;
use pilot_core::coordination::{cas_stress, CoordinationStore, InMemoryStore};
use pilot_core::workload_gen::{random_workload, small_instance};
use pilot_core::{bind, optimal_makespan_oracle, run_workload, Policy, RunOptions};

fn bind_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("bind_epoch");
    for &(cus, pilots) in &[(100, 10), (1000, 50), (5000, 100)] {
        let fx = EpochFixture::new(cus, pilots, 200);
        let requests = fx.requests();
        for policy in [Policy::Affinity, Policy::RoundRobin] {
            group.bench_with_input(
                BenchmarkId::new(policy.to_string(), format!("{cus}x{pilots}")),
                &requests,
                |b, reqs| {
                    b.iter(|| {
                        let mut cursor = 0;
                        black_box(bind(reqs, &fx.pilots, &fx.placement, policy, &mut cursor))
                    })
                },
            );
        }
    }
    group.finish();
}

fn sim_run(c: &mut Criterion) {
    let manifests: Vec<_> = (0..8).map(random_workload).collect();
    c.bench_function("sim_run/random_workloads_x8", |b| {
        b.iter(|| {
            for m in &manifests {
                black_box(run_workload(m, RunOptions::default()).expect("generated manifests run"));
            }
        })
    });
}

fn oracle(c: &mut Criterion) {
    let m = small_instance(1003);
    c.bench_function("oracle/small_instance", |b| {
        b.iter(|| black_box(optimal_makespan_oracle(&m).expect("small enough")))
    });
}

fn cas(c: &mut Criterion) {
    c.bench_function("cas_stress/16x100", |b| {
        b.iter(|| {
            let store: Arc<dyn CoordinationStore> = Arc::new(InMemoryStore::new());
            black_box(cas_stress(&store, "k", 16, 100))
        })
    });
}

criterion_group!(benches, bind_epoch, sim_run, oracle, cas);
criterion_main!(benches);
