//! Runs a whole manifest: submit everything at time zero, wait, close and
//! compute metrics.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::data::DataError;
use crate::kernel::{ServiceError, WaitReport};
use crate::ledger::EventLog;
use crate::manifest::WorkloadManifest;
use crate::metrics::{emit_metrics, MetricsError, MetricsReport};
use crate::model::{BackendKind, CuState, Violation};
use crate::scheduler::Policy;
use crate::service::{PilotComputeService, ServiceOptions, WaitError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNFINISHED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Required backend; must agree with the pilots' resources.
    pub backend: Option<BackendKind>,
    pub policy: Policy,
    /// Overrides the manifest seed.
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
    /// Where local input files are read from, usually the manifest's directory.
    pub source_dir: Option<PathBuf>,
    pub inject_duplicates: bool,
    pub audit: bool,
    /// Give up waiting after this long (virtual seconds in sim mode).
    pub timeout: Option<Duration>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid manifest:\n  {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Violation>),
    #[error("backend {requested} requested but the manifest's pilots use {found}")]
    BackendMismatch { requested: BackendKind, found: BackendKind },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) | RunError::BackendMismatch { .. } => EXIT_INVALID,
            RunError::Service(_) | RunError::Metrics(_) => EXIT_UNFINISHED,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub log: EventLog,
    pub metrics: MetricsReport,
    pub report: WaitReport,
    pub exceeded: bool,
    /// Conservation violations from an audited sim run.
    pub violations: Vec<String>,
    pub peak_processes: usize,
    /// The wait gave up before the workload settled.
    pub timed_out: bool,
}

impl RunOutcome {
    /// 0 when every unit is DONE, 3 when the budget ran out, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.exceeded {
            EXIT_BUDGET
        } else if !self.timed_out && self.report.states.values().all(|s| *s == CuState::Done) {
            EXIT_OK
        } else {
            EXIT_UNFINISHED
        }
    }
}

/// The backend named by the manifest's pilots; sim for a manifest without
/// pilots.
pub fn manifest_backend(m: &WorkloadManifest) -> BackendKind {
    m.pilots.iter().find_map(|p| p.backend()).unwrap_or(BackendKind::Sim)
}

pub fn run_workload(manifest: &WorkloadManifest, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let violations = manifest.validate();
    if !violations.is_empty() {
        return Err(RunError::Invalid(violations));
    }
    let found = manifest_backend(manifest);
    let backend = match opts.backend {
        Some(requested) if requested != found && !manifest.pilots.is_empty() => {
            return Err(RunError::BackendMismatch { requested, found })
        }
        Some(requested) => requested,
        None => found,
    };
    let svc = PilotComputeService::new(
        backend,
        ServiceOptions {
            policy: opts.policy,
            seed: opts.seed.or(manifest.seed),
            t_max_s: manifest.t_max_s,
            bandwidth: manifest.bandwidth.clone(),
            workroot: opts.workdir,
            source_dir: opts.source_dir,
            inject_duplicates: opts.inject_duplicates,
            audit: opts.audit,
        },
    )?;
    for p in &manifest.pilots {
        svc.create_pilot(p.clone())?;
    }
    for du in &manifest.data_units {
        match svc.submit_du(du.clone()) {
            // the unit is registered as FAILED and its consumers end up unschedulable
            Err(ServiceError::Data(e @ DataError::CapacityExceeded { .. })) => log::warn!("du {}: {e}", du.id),
            other => {
                other?;
            }
        }
    }
    for cu in &manifest.compute_units {
        svc.submit_cu(cu.clone())?;
    }
    let timed_out = match svc.wait(opts.timeout) {
        Ok(_) => false,
        Err(WaitError::Timeout(_)) => true,
    };
    let done = svc.close();
    let metrics = emit_metrics(&done.log)?;
    Ok(RunOutcome {
        log: done.log,
        metrics,
        report: done.report,
        exceeded: done.exceeded,
        violations: done.violations,
        peak_processes: done.peak_processes,
        timed_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComputeUnitDescription, PilotDescription};

    fn manifest(durations: &[f64], t_max: Option<u64>) -> WorkloadManifest {
        WorkloadManifest {
            pilots: vec![PilotDescription {
                id: "p1".into(),
                resource: "sim://a".into(),
                cores: 1,
                walltime_s: 1000,
                affinity: "a".into(),
                store_capacity_bytes: 0,
                queue_delay_s: 0,
            }],
            compute_units: durations
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut c = ComputeUnitDescription::new(format!("c{i}"), "true");
                    c.sim_duration_s = Some(*d);
                    c
                })
                .collect(),
            t_max_s: t_max,
            ..Default::default()
        }
    }

    #[test]
    fn exit_codes() {
        let ok = run_workload(&manifest(&[1.0, 2.0], None), RunOptions::default()).unwrap();
        assert_eq!(ok.exit_code(), EXIT_OK);
        assert_eq!(ok.metrics.t_c, 3.0);

        let mut failing = manifest(&[1.0], None);
        failing.compute_units[0].sim_fail = true;
        assert_eq!(
            run_workload(&failing, RunOptions::default()).unwrap().exit_code(),
            EXIT_UNFINISHED
        );

        let mut too_big = manifest(&[1.0], None);
        too_big.compute_units[0].cores = 2;
        let out = run_workload(&too_big, RunOptions::default()).unwrap();
        assert_eq!(out.exit_code(), EXIT_UNFINISHED);
        assert_eq!(out.metrics.unschedulable["c0"], "cores");

        let budget = run_workload(&manifest(&[5.0, 5.0], Some(7)), RunOptions::default()).unwrap();
        assert_eq!(budget.exit_code(), EXIT_BUDGET);
    }

    #[test]
    fn invalid_and_mismatched_manifests() {
        let mut bad = manifest(&[1.0], None);
        bad.compute_units[0].sim_duration_s = None;
        let err = run_workload(&bad, RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INVALID);

        let opts = RunOptions {
            backend: Some(BackendKind::Local),
            ..Default::default()
        };
        let err = run_workload(&manifest(&[1.0], None), opts).unwrap_err();
        assert!(matches!(err, RunError::BackendMismatch { .. }));
        assert_eq!(err.exit_code(), EXIT_INVALID);
    }
}
