//! A pilot-job kernel: placeholder jobs (pilots) hold slots and a data
//! store, compute units and data units are bound to them late by a
//! data-aware scheduler, and every state change lands in a replayable JSONL
//! event log. Runs either as a deterministic simulation or against real
//! local processes.

pub mod agent;
pub mod audit;
pub mod coordination;
pub mod data;
pub mod kernel;
pub mod ledger;
pub mod local;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod run;
pub mod scheduler;
pub mod service;
pub mod sim;
pub mod workload_gen;

pub use audit::audit_log;
pub use kernel::{ServiceError, WaitReport};
pub use ledger::{Event, EventKind, EventLog, LogHeader};
pub use manifest::{parse_manifest, BandwidthMatrix, ManifestError, WorkloadManifest};
pub use metrics::{emit_metrics, CuTimeline, MetricsError, MetricsReport};
pub use model::{
    BackendKind, ComputeUnitDescription, CuId, CuState, DataUnitDescription, DuId, DuState, EntityRef,
    PilotDescription, PilotId, PilotState, Tick, Violation,
};
pub use run::{run_workload, RunError, RunOptions, RunOutcome};
pub use scheduler::{bind, optimal_makespan_oracle, Policy};
pub use service::{Finished, PilotComputeService, ServiceOptions, WaitError};
