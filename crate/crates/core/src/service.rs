//! Client-facing compute-data service: one object to create pilots, submit
//! data and compute units, cancel, wait and collect the log, whichever
//! backend runs underneath.

use std::path::PathBuf;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::kernel::{Kernel, KernelConfig, ServiceError, WaitReport};
use crate::ledger::EventLog;
use crate::local::LocalRuntime;
use crate::manifest::BandwidthMatrix;
use crate::model::{
    BackendKind, ComputeUnitDescription, CuId, DataUnitDescription, DuId, EntityRef, PilotDescription, PilotId, Tick,
};
use crate::scheduler::Policy;
use crate::sim::SimRuntime;

#[derive(Clone, Debug, Default)]
pub struct ServiceOptions {
    pub policy: Policy,
    pub seed: Option<u64>,
    pub t_max_s: Option<u64>,
    pub bandwidth: Option<BandwidthMatrix>,
    pub workroot: Option<PathBuf>,
    pub source_dir: Option<PathBuf>,
    pub inject_duplicates: bool,
    /// Sim only: check store conservation after every event.
    pub audit: bool,
}

#[derive(Debug, Error)]
pub enum WaitError {
    #[error("timed out with {} units unfinished", unfinished(.0))]
    Timeout(WaitReport),
}

fn unfinished(report: &WaitReport) -> usize {
    report
        .states
        .values()
        .filter(|s| !crate::model::Lifecycle::is_terminal(**s))
        .count()
}

/// What a closed service leaves behind.
#[derive(Debug)]
pub struct Finished {
    pub log: EventLog,
    pub report: WaitReport,
    pub exceeded: bool,
    /// Conservation violations seen during an audited sim run.
    pub violations: Vec<String>,
    /// Local only: most child processes alive at once.
    pub peak_processes: usize,
}

enum Backend {
    Sim(Box<Mutex<SimRuntime>>),
    Local(LocalRuntime),
}

pub struct PilotComputeService {
    backend: Backend,
}

impl PilotComputeService {
    pub fn new(kind: BackendKind, opts: ServiceOptions) -> Result<Self, ServiceError> {
        let mut config = KernelConfig::new(kind);
        config.policy = opts.policy;
        config.seed = opts.seed;
        config.t_max_s = opts.t_max_s;
        config.bandwidth = opts.bandwidth;
        config.workroot = opts.workroot;
        config.source_dir = opts.source_dir;
        config.inject_duplicates = opts.inject_duplicates;
        let backend = match kind {
            BackendKind::Sim => {
                let mut rt = SimRuntime::new(config);
                if opts.audit {
                    rt = rt.with_audit();
                }
                Backend::Sim(Box::new(Mutex::new(rt)))
            }
            BackendKind::Local => Backend::Local(LocalRuntime::new(config)?),
        };
        Ok(Self { backend })
    }

    pub fn backend(&self) -> BackendKind {
        match self.backend {
            Backend::Sim(_) => BackendKind::Sim,
            Backend::Local(_) => BackendKind::Local,
        }
    }

    fn call<R>(&self, f: impl FnOnce(&mut Kernel, Tick) -> R) -> R {
        match &self.backend {
            Backend::Sim(rt) => rt.lock().with_kernel(f),
            Backend::Local(rt) => rt.with_kernel(f),
        }
    }

    pub fn create_pilot(&self, desc: PilotDescription) -> Result<PilotId, ServiceError> {
        self.call(|k, now| k.create_pilot(desc, now))
    }

    pub fn submit_du(&self, desc: DataUnitDescription) -> Result<DuId, ServiceError> {
        self.call(|k, now| k.submit_du(desc, now))
    }

    pub fn submit_cu(&self, desc: ComputeUnitDescription) -> Result<CuId, ServiceError> {
        self.call(|k, now| k.submit_cu(desc, now))
    }

    pub fn cancel(&self, target: &EntityRef) -> Result<(), ServiceError> {
        self.call(|k, now| k.cancel(target, now))
    }

    /// Blocks until every submitted unit is terminal or blocked for good.
    /// In sim mode the timeout is measured in virtual seconds.
    pub fn wait(&self, timeout: Option<Duration>) -> Result<WaitReport, WaitError> {
        match &self.backend {
            Backend::Sim(rt) => {
                let mut rt = rt.lock();
                match timeout {
                    None => rt.run(),
                    Some(d) => {
                        let limit = rt.now() + d.as_secs();
                        rt.run_until(limit);
                    }
                }
                let report = rt.kernel().report();
                if rt.is_active() {
                    Err(WaitError::Timeout(report))
                } else {
                    Ok(report)
                }
            }
            Backend::Local(rt) => rt.wait(timeout).map_err(|t| WaitError::Timeout(t.0)),
        }
    }

    /// The log as recorded so far.
    pub fn event_log(&self) -> EventLog {
        match &self.backend {
            Backend::Sim(rt) => rt.lock().kernel().snapshot(),
            Backend::Local(rt) => rt.snapshot(),
        }
    }

    /// Ends the run and returns the final log.
    pub fn close(self) -> Finished {
        match self.backend {
            Backend::Sim(rt) => {
                let mut rt = (*rt).into_inner();
                rt.close();
                Finished {
                    log: rt.kernel().snapshot(),
                    report: rt.kernel().report(),
                    exceeded: rt.exceeded(),
                    violations: rt.violations().to_vec(),
                    peak_processes: 0,
                }
            }
            Backend::Local(rt) => {
                rt.close();
                Finished {
                    log: rt.snapshot(),
                    report: rt.report(),
                    exceeded: rt.exceeded(),
                    violations: Vec::new(),
                    peak_processes: rt.peak_processes(),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CuState;

    fn sim_pilot(id: &str) -> PilotDescription {
        PilotDescription {
            id: id.into(),
            resource: "sim://a".into(),
            cores: 1,
            walltime_s: 1000,
            affinity: "a".into(),
            store_capacity_bytes: 0,
            queue_delay_s: 0,
        }
    }

    fn sim_cu(id: &str, d: f64) -> ComputeUnitDescription {
        let mut c = ComputeUnitDescription::new(id, "true");
        c.sim_duration_s = Some(d);
        c
    }

    #[test]
    fn sim_round_trip() {
        let svc = PilotComputeService::new(BackendKind::Sim, ServiceOptions::default()).unwrap();
        svc.create_pilot(sim_pilot("p1")).unwrap();
        svc.submit_cu(sim_cu("c1", 3.0)).unwrap();
        assert!(svc.wait(None).unwrap().all_done());
        let done = svc.close();
        assert!(!done.exceeded);
        assert_eq!(done.report.states[&CuId::from("c1")], CuState::Done);
    }

    #[test]
    fn sim_wait_times_out_in_virtual_seconds() {
        let svc = PilotComputeService::new(BackendKind::Sim, ServiceOptions::default()).unwrap();
        svc.create_pilot(sim_pilot("p1")).unwrap();
        svc.submit_cu(sim_cu("c1", 50.0)).unwrap();
        assert!(matches!(
            svc.wait(Some(Duration::from_secs(10))),
            Err(WaitError::Timeout(_))
        ));
        assert!(svc.wait(Some(Duration::from_secs(100))).is_ok());
    }

    #[test]
    fn wrong_backend_is_rejected() {
        let svc = PilotComputeService::new(BackendKind::Sim, ServiceOptions::default()).unwrap();
        let mut p = sim_pilot("p1");
        p.resource = "local://".into();
        assert!(matches!(svc.create_pilot(p), Err(ServiceError::BackendUnavailable(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let svc = PilotComputeService::new(BackendKind::Sim, ServiceOptions::default()).unwrap();
        svc.create_pilot(sim_pilot("p1")).unwrap();
        assert!(matches!(
            svc.create_pilot(sim_pilot("p1")),
            Err(ServiceError::DuplicatePilotId(_))
        ));
        svc.submit_cu(sim_cu("c1", 1.0)).unwrap();
        assert!(matches!(
            svc.submit_cu(sim_cu("c1", 1.0)),
            Err(ServiceError::DuplicateCuId(_))
        ));
    }

    #[test]
    fn cancel_unknown_entity() {
        let svc = PilotComputeService::new(BackendKind::Sim, ServiceOptions::default()).unwrap();
        let err = svc.cancel(&EntityRef::Cu("nope".into())).unwrap_err();
        assert!(matches!(err, ServiceError::UnknownEntity(_)));
    }
}
