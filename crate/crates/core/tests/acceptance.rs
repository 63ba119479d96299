//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use pilot_core::coordination::{cas_stress, CoordinationStore, InMemoryStore};
use pilot_core::workload_gen::{locality_case, noop_local_workload, random_workload, small_suite, two_site_workload};
use pilot_core::{
    audit_log, emit_metrics, optimal_makespan_oracle, run_workload, BackendKind, CuState, EventKind, EventLog, Policy,
    RunOptions, RunOutcome, WorkloadManifest,
};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn sim_run(m: &WorkloadManifest, opts: RunOptions) -> RunOutcome {
    run_workload(m, opts).unwrap_or_else(|e| panic!("run failed: {e}"))
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    if took < limit {
        Ok(took)
    } else {
        Err(format!("took {took:.1?}, limit {limit:?}"))
    }
}

fn soundness() -> Verdict {
    let started = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..1000 {
        let out = sim_run(
            &random_workload(seed),
            RunOptions {
                audit: true,
                ..Default::default()
            },
        );
        let mut problems = audit_log(&out.log);
        problems.extend(out.violations);
        if !problems.is_empty() {
            failures.push(format!("seed {seed}: {}", problems[0]));
        }
    }
    let took = within(Duration::from_secs(60), started)?;
    if failures.is_empty() {
        Ok(format!("1000 workloads, 0 violations, {took:.1?}"))
    } else {
        Err(format!(
            "{} workloads with violations; first: {}",
            failures.len(),
            failures[0]
        ))
    }
}

fn determinism() -> Verdict {
    let started = Instant::now();
    for seed in 0..50 {
        let m = random_workload(10_000 + seed);
        let a = sim_run(&m, RunOptions::default()).log.body_jsonl();
        let b = sim_run(&m, RunOptions::default()).log.body_jsonl();
        if a != b {
            return Err(format!("seed {} produced different logs", 10_000 + seed));
        }
    }
    let took = within(Duration::from_secs(30), started)?;
    Ok(format!("50 manifests byte-identical, {took:.1?}"))
}

fn first_bind_pilot(log: &EventLog, cu: &str) -> Option<String> {
    let entity = format!("cu/{cu}");
    log.events
        .iter()
        .find(|e| e.kind == EventKind::Bind && e.entity == entity)
        .and_then(|e| e.data_str("pilot"))
        .map(str::to_owned)
}

fn locality_preference() -> Verdict {
    let started = Instant::now();
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..200 {
        let case = locality_case(seed);
        let out = sim_run(&case.manifest, RunOptions::default());
        match first_bind_pilot(&out.log, case.probe.as_str()) {
            Some(p) if p == case.holder.as_str() => hits += 1,
            other => misses.push(format!("seed {seed}: bound to {other:?}, holder {}", case.holder)),
        }
    }
    let took = within(Duration::from_secs(10), started)?;
    if misses.is_empty() {
        Ok(format!("{hits}/200 bound to the holder, {took:.1?}"))
    } else {
        Err(format!("{hits}/200; first miss {}", misses[0]))
    }
}

fn locality_payoff() -> Verdict {
    let started = Instant::now();
    let mut lines = Vec::new();
    for seed in 0..5 {
        let m = two_site_workload(seed);
        let bytes = |policy| {
            sim_run(
                &m,
                RunOptions {
                    policy,
                    ..Default::default()
                },
            )
            .metrics
            .bytes_transferred
        };
        let affinity = bytes(Policy::Affinity);
        let rr = bytes(Policy::RoundRobin);
        if rr == 0 || affinity as f64 > 0.2 * rr as f64 {
            return Err(format!("seed {seed}: affinity {affinity} B vs round-robin {rr} B"));
        }
        lines.push(format!("{:.0}%", 100.0 * (1.0 - affinity as f64 / rr as f64)));
        if seed == 0 {
            lines.push(format!("(affinity {affinity} B, round-robin {rr} B)"));
        }
    }
    let took = within(Duration::from_secs(10), started)?;
    Ok(format!("bytes saved per seed {}, {took:.1?}", lines.join(" ")))
}

fn oracle_bound() -> Verdict {
    let started = Instant::now();
    let mut max_ratio: f64 = 0.0;
    for (i, m) in small_suite().iter().enumerate() {
        let out = sim_run(m, RunOptions::default());
        if out.exit_code() != 0 {
            return Err(format!("instance {i} did not complete"));
        }
        let greedy = out.metrics.t_c;
        let optimal = optimal_makespan_oracle(m).map_err(|e| format!("instance {i}: {e}"))? as f64;
        if greedy + 1e-9 < optimal {
            return Err(format!("instance {i}: greedy {greedy} beats the optimum {optimal}"));
        }
        let ratio = greedy / optimal;
        max_ratio = max_ratio.max(ratio);
        if ratio > 2.0 {
            return Err(format!(
                "instance {i}: ratio {ratio:.3} (greedy {greedy}, optimal {optimal})"
            ));
        }
    }
    let took = within(Duration::from_secs(60), started)?;
    Ok(format!(
        "25 instances, max greedy/optimal ratio {max_ratio:.3}, {took:.1?}"
    ))
}

fn local_end_to_end() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let out = run_workload(
        &noop_local_workload(100, 2, 4),
        RunOptions {
            backend: Some(BackendKind::Local),
            workdir: Some(dir.path().to_owned()),
            timeout: Some(Duration::from_secs(60)),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(60), started)?;
    let done = out.report.states.values().filter(|s| **s == CuState::Done).count();
    if out.exit_code() != 0 || done != 100 {
        return Err(format!("exit {}, {done}/100 DONE", out.exit_code()));
    }
    if out.peak_processes > 8 {
        return Err(format!("{} concurrent processes", out.peak_processes));
    }
    Ok(format!(
        "exit 0, 100/100 DONE, peak {} processes, {took:.1?}",
        out.peak_processes
    ))
}

fn metrics_purity() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    for seed in 0..20 {
        let out = sim_run(&random_workload(20_000 + seed), RunOptions::default());
        let path = dir.path().join(format!("run{seed}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
        out.log.write_jsonl(file).map_err(|e| e.to_string())?;
        let file = std::fs::File::open(&path).map_err(|e| e.to_string())?;
        let replayed = EventLog::read_jsonl(std::io::BufReader::new(file)).map_err(|e| e.to_string())?;
        let metrics = emit_metrics(&replayed).map_err(|e| e.to_string())?;
        if metrics != out.metrics {
            return Err(format!(
                "seed {}: replay differs (T_C {} vs {}, bytes {} vs {})",
                20_000 + seed,
                metrics.t_c,
                out.metrics.t_c,
                metrics.bytes_transferred,
                out.metrics.bytes_transferred
            ));
        }
    }
    let took = within(Duration::from_secs(10), started)?;
    Ok(format!("20 replays identical to live metrics, {took:.1?}"))
}

/// A random workload where every issued command must reach RUNNING: no
/// failures, no walltime or budget expiry, unlimited stores.
fn duplicate_trial(seed: u64) -> WorkloadManifest {
    let mut m = random_workload(30_000 + seed);
    m.t_max_s = None;
    for p in &mut m.pilots {
        p.walltime_s = 1_000_000;
        p.store_capacity_bytes = u64::MAX / 4;
    }
    for cu in &mut m.compute_units {
        cu.sim_fail = false;
    }
    m
}

fn coordination() -> Verdict {
    let started = Instant::now();
    let store: Arc<dyn CoordinationStore> = Arc::new(InMemoryStore::new());
    let stress = cas_stress(&store, "stress", 100, 50);
    if !stress.is_consistent() {
        return Err(format!(
            "CAS: {} successes, final version {}",
            stress.successes, stress.final_version
        ));
    }
    let mut commands = 0;
    let mut duplicates = 0;
    for seed in 0..100 {
        let out = sim_run(
            &duplicate_trial(seed),
            RunOptions {
                inject_duplicates: true,
                ..Default::default()
            },
        );
        let mut issued = BTreeSet::new();
        let mut runs: BTreeMap<String, u32> = BTreeMap::new();
        for e in &out.log.events {
            match (e.kind, e.to.as_deref(), e.data_str("command_id")) {
                (EventKind::Transition, Some("PENDING"), Some(id)) => {
                    issued.insert(id.to_owned());
                }
                (EventKind::Transition, Some("RUNNING"), Some(id)) => *runs.entry(id.to_owned()).or_default() += 1,
                (EventKind::Duplicate, _, Some(_)) => duplicates += 1,
                _ => {}
            }
        }
        for id in &issued {
            let n = runs.get(id).copied().unwrap_or(0);
            if n != 1 {
                return Err(format!("trial {seed}: command {id} executed {n} times"));
            }
        }
        if runs.len() != issued.len() {
            return Err(format!("trial {seed}: execution without a command"));
        }
        commands += issued.len();
    }
    if duplicates == 0 {
        return Err("no duplicate was delivered".into());
    }
    let took = within(Duration::from_secs(30), started)?;
    Ok(format!(
        "CAS {} successes over {} attempts, final version {}; {commands} commands, {duplicates} duplicates dropped, each executed once; {took:.1?}",
        stress.successes,
        stress.successes + stress.conflicts,
        stress.final_version
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 state-machine soundness", soundness),
        ("2 determinism", determinism),
        ("3 locality preference", locality_preference),
        ("4 locality payoff", locality_payoff),
        ("5 oracle bound", oracle_bound),
        ("6 local end-to-end", local_end_to_end),
        ("7 metrics purity", metrics_purity),
        ("8 coordination correctness", coordination),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
