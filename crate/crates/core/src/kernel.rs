//! Manager state shared by both backends: pilots, compute units, the
//! scheduler, the data service and each agent's slot book.
//!
//! Every method takes the current time and may queue [`Effect`]s. The
//! runtime turns effects into timers, threads or processes and feeds their
//! completions back through [`Kernel::transfer_done`], [`Kernel::finish_cu`]
//! and friends.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{AgentCore, BackendResult, Directive, POLL_BATCH};
use crate::coordination::{Command, CoordinationStore, InMemoryStore};
use crate::data::{DataError, DataMode, DataService, PendingTransfer, StoreRoot, TransferStart};
use crate::ledger::{EntityRecord, EventKind, EventLog, Ledger, LogHeader};
use crate::manifest::{BandwidthMatrix, WorkloadManifest};
use crate::model::{
    entity_key, validate_manifest, BackendKind, ComputeUnitDescription, CuId, CuState, DataUnitDescription, DuId,
    EntityKind, EntityRef, Lifecycle, PilotDescription, PilotId, PilotState, Tick,
};
use crate::scheduler::{PilotView, Policy, Scheduler};

#[derive(Clone, Debug)]
pub struct KernelConfig {
    pub backend: BackendKind,
    pub policy: Policy,
    pub seed: Option<u64>,
    pub t_max_s: Option<u64>,
    pub bandwidth: Option<BandwidthMatrix>,
    /// Local backend: directory holding one subdirectory per pilot.
    pub workroot: Option<PathBuf>,
    /// Local backend: where files of pre-placed and external data units are read.
    pub source_dir: Option<PathBuf>,
    /// Deliver every RUN_CU command twice.
    pub inject_duplicates: bool,
}

impl KernelConfig {
    pub fn new(backend: BackendKind) -> Self {
        Self {
            backend,
            policy: Policy::default(),
            seed: None,
            t_max_s: None,
            bandwidth: None,
            workroot: None,
            source_dir: None,
            inject_duplicates: false,
        }
    }
}

/// An input data unit to copy into a local workdir before execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedInput {
    pub du_id: DuId,
    pub store_dir: PathBuf,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecRequest {
    pub cu: ComputeUnitDescription,
    pub pilot: PilotId,
    pub attempt: u32,
    pub workdir: Option<PathBuf>,
    pub inputs: Vec<StagedInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    /// Start the pilot's backend; the pilot heartbeats after `delay_s`.
    Launch {
        pilot: PilotId,
        delay_s: u64,
    },
    /// The pilot's walltime ends at `at`.
    Deadline {
        pilot: PilotId,
        at: Tick,
    },
    /// Commands are waiting for the pilot's agent.
    Poll(PilotId),
    Transfer(PendingTransfer),
    Execute(ExecRequest),
    /// Stop a running execution early.
    Kill {
        cu: CuId,
        attempt: u32,
    },
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("`{0}` is already in a terminal state")]
    AlreadyTerminal(String),
    #[error("pilot id `{0}` is already registered")]
    DuplicatePilotId(PilotId),
    #[error("compute unit id `{0}` is already submitted")]
    DuplicateCuId(CuId),
    #[error("compute unit `{cu}` references undeclared data unit `{du}`")]
    UnresolvedDu { cu: CuId, du: DuId },
    #[error("no backend available for resource `{0}`")]
    BackendUnavailable(String),
    #[error("invalid description: {0}")]
    Invalid(String),
    #[error("data units cannot be canceled")]
    NotCancelable,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("store setup failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-CU outcome returned by `wait`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WaitReport {
    pub states: BTreeMap<CuId, CuState>,
    /// Units that can never run, with the reason: `cores`, `input` or `no pilot`.
    pub unschedulable: BTreeMap<CuId, String>,
}

impl WaitReport {
    pub fn all_done(&self) -> bool {
        self.unschedulable.is_empty() && self.states.values().all(|s| *s == CuState::Done)
    }
}

struct PilotEntry {
    desc: PilotDescription,
    state: PilotState,
    agent: AgentCore,
}

struct CuEntry {
    desc: ComputeUnitDescription,
    state: CuState,
    pilot: Option<PilotId>,
    attempt: u32,
    retries: u32,
    command_id: Option<String>,
    waiting: BTreeSet<DuId>,
}

impl CuEntry {
    fn holds_reservation(&self) -> bool {
        matches!(self.state, CuState::Pending | CuState::Staging | CuState::Running)
    }
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

pub struct Kernel {
    config: KernelConfig,
    store: Arc<InMemoryStore>,
    ledger: Ledger,
    pilots: BTreeMap<PilotId, PilotEntry>,
    cus: BTreeMap<CuId, CuEntry>,
    cu_order: Vec<CuId>,
    producers: BTreeMap<DuId, CuId>,
    scheduler: Scheduler,
    data: DataService,
    waiters: BTreeMap<(DuId, PilotId), Vec<(CuId, u32)>>,
    reported: BTreeSet<CuId>,
    next_command: u64,
    epoch_requested: bool,
    effects: Vec<Effect>,
    stopped: bool,
}

impl Kernel {
    pub fn new(config: KernelConfig) -> Self {
        let store = Arc::new(InMemoryStore::new());
        let header = LogHeader::new(config.backend, config.seed).with_t_max(config.t_max_s);
        let ledger = Ledger::new(store.clone() as Arc<dyn CoordinationStore>, header);
        let mode = match (&config.backend, &config.source_dir) {
            (BackendKind::Local, Some(dir)) => DataMode::Local {
                source_dir: dir.clone(),
            },
            (BackendKind::Local, None) => DataMode::Local {
                source_dir: PathBuf::from("."),
            },
            (BackendKind::Sim, _) => DataMode::Virtual,
        };
        Self {
            data: DataService::new(mode, config.bandwidth.clone()),
            scheduler: Scheduler::new(config.policy),
            config,
            store,
            ledger,
            pilots: BTreeMap::new(),
            cus: BTreeMap::new(),
            cu_order: Vec::new(),
            producers: BTreeMap::new(),
            waiters: BTreeMap::new(),
            reported: BTreeSet::new(),
            next_command: 1,
            epoch_requested: false,
            effects: Vec::new(),
            stopped: false,
        }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn store(&self) -> &Arc<InMemoryStore> {
        &self.store
    }

    pub fn data(&self) -> &DataService {
        &self.data
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn snapshot(&self) -> EventLog {
        self.ledger.snapshot()
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn pilot_state(&self, pilot: &PilotId) -> Option<PilotState> {
        self.pilots.get(pilot).map(|p| p.state)
    }

    pub fn cu_state(&self, cu: &CuId) -> Option<CuState> {
        self.cus.get(cu).map(|c| c.state)
    }

    /// Slots of `pilot` currently held by compute units.
    pub fn occupied_slots(&self, pilot: &PilotId) -> u32 {
        self.pilots
            .get(pilot)
            .map_or(0, |p| p.desc.cores - p.agent.free_slots())
    }

    pub fn take_effects(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.effects)
    }

    pub fn take_epoch_request(&mut self) -> bool {
        std::mem::take(&mut self.epoch_requested)
    }

    fn request_epoch(&mut self) {
        if !self.stopped {
            self.epoch_requested = true;
        }
    }

    fn next_command_id(&mut self) -> String {
        let id = format!("cmd-{:06}", self.next_command);
        self.next_command += 1;
        id
    }

    fn workdir(&self, pilot: &PilotId, cu: &CuId) -> Option<PathBuf> {
        self.config
            .workroot
            .as_ref()
            .map(|root| root.join(pilot.as_str()).join("cu").join(cu.as_str()))
    }

    fn cu_transition(&mut self, cu: &CuId, to: CuState, now: Tick, data: Value) {
        let entry = self.cus.get_mut(cu).expect("known compute unit");
        if let Err(e) = self.ledger.transition(cu.as_str(), entry.state, to, now, data) {
            panic!("kernel bookkeeping diverged from the ledger: {e}");
        }
        entry.state = to;
    }

    fn pilot_transition(&mut self, pilot: &PilotId, to: PilotState, now: Tick, data: Value) {
        let entry = self.pilots.get_mut(pilot).expect("known pilot");
        if let Err(e) = self.ledger.transition(pilot.as_str(), entry.state, to, now, data) {
            panic!("kernel bookkeeping diverged from the ledger: {e}");
        }
        entry.state = to;
    }

    fn warn(&self, now: Tick, entity: String, data: Value) {
        log::warn!("{entity}: {data}");
        self.ledger.note(now, EventKind::Warning, entity, data);
    }

    /// Registers a pilot and requests its backend start.
    pub fn create_pilot(&mut self, desc: PilotDescription, now: Tick) -> Result<PilotId, ServiceError> {
        if self.pilots.contains_key(&desc.id) {
            return Err(ServiceError::DuplicatePilotId(desc.id));
        }
        let single = WorkloadManifest {
            pilots: vec![desc.clone()],
            ..Default::default()
        };
        let violations = validate_manifest(&single);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(ServiceError::Invalid(text.join("; ")));
        }
        if desc.backend() != Some(self.config.backend) {
            return Err(ServiceError::BackendUnavailable(desc.resource));
        }
        let id = desc.id.clone();
        let root = match &self.config.workroot {
            Some(dir) => StoreRoot::Dir(dir.join(id.as_str()).join("store")),
            None => StoreRoot::Virtual,
        };
        self.data
            .add_store(id.clone(), desc.site(), desc.store_capacity_bytes, root)?;
        self.store.register_pilot(&id);
        self.ledger
            .create(
                id.as_str(),
                EntityRecord::new_pilot(now),
                json!({
                    "cores": desc.cores,
                    "resource": desc.resource,
                    "walltime_s": desc.walltime_s,
                    "affinity": desc.affinity,
                    "store_capacity_bytes": desc.store_capacity_bytes,
                }),
            )
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        self.pilots.insert(
            id.clone(),
            PilotEntry {
                agent: AgentCore::new(id.clone(), desc.cores),
                state: PilotState::New,
                desc: desc.clone(),
            },
        );
        self.pilot_transition(&id, PilotState::Queued, now, Value::Null);
        self.effects.push(Effect::Launch {
            pilot: id.clone(),
            delay_s: desc.queue_delay_s,
        });
        Ok(id)
    }

    /// The pilot's agent has heartbeated.
    pub fn activate_pilot(&mut self, pilot: &PilotId, now: Tick) {
        let Some(entry) = self.pilots.get(pilot) else { return };
        if entry.state != PilotState::Queued || self.stopped {
            return;
        }
        let walltime = entry.desc.walltime_s;
        self.pilot_transition(pilot, PilotState::Running, now, Value::Null);
        let ticks = (walltime as f64 * self.config.backend.ticks_per_second()) as Tick;
        self.effects.push(Effect::Deadline {
            pilot: pilot.clone(),
            at: now + ticks,
        });
        self.request_epoch();
    }

    pub fn submit_du(&mut self, desc: DataUnitDescription, now: Tick) -> Result<DuId, ServiceError> {
        if desc.files.is_empty() {
            return Err(ServiceError::Invalid(format!("data unit `{}` lists no files", desc.id)));
        }
        let id = self.data.submit_du(&self.ledger, desc, now)?;
        self.request_epoch();
        Ok(id)
    }

    pub fn submit_cu(&mut self, desc: ComputeUnitDescription, now: Tick) -> Result<CuId, ServiceError> {
        if self.cus.contains_key(&desc.id) {
            return Err(ServiceError::DuplicateCuId(desc.id));
        }
        for du in desc.input_data.iter().chain(&desc.output_data) {
            if !self.data.contains(du) {
                return Err(ServiceError::UnresolvedDu {
                    cu: desc.id.clone(),
                    du: du.clone(),
                });
            }
        }
        if desc.cores == 0 {
            return Err(ServiceError::Invalid(format!(
                "compute unit `{}` needs cores ≥ 1",
                desc.id
            )));
        }
        if self.config.backend == BackendKind::Sim && !desc.sim_duration_s.is_some_and(|d| d > 0.0) {
            return Err(ServiceError::Invalid(format!(
                "compute unit `{}` needs sim_duration_s > 0 under the sim backend",
                desc.id
            )));
        }
        for du in &desc.output_data {
            if self.producers.contains_key(du) || self.data.state_of(du) != Some(crate::model::DuState::New) {
                return Err(ServiceError::Invalid(format!(
                    "data unit `{du}` cannot be an output of `{}`",
                    desc.id
                )));
            }
        }
        let id = desc.id.clone();
        self.ledger
            .create(
                id.as_str(),
                EntityRecord::new_cu(desc.max_retries, now),
                json!({
                    "cores": desc.cores,
                    "inputs": desc.input_data,
                    "outputs": desc.output_data,
                    "max_retries": desc.max_retries,
                }),
            )
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        self.scheduler
            .form_su(&desc)
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        for du in &desc.output_data {
            self.producers.insert(du.clone(), id.clone());
        }
        self.cu_order.push(id.clone());
        self.cus.insert(
            id.clone(),
            CuEntry {
                desc,
                state: CuState::New,
                pilot: None,
                attempt: 0,
                retries: 0,
                command_id: None,
                waiting: BTreeSet::new(),
            },
        );
        self.cu_transition(&id, CuState::Unscheduled, now, Value::Null);
        self.request_epoch();
        Ok(id)
    }

    fn pilot_views(&self) -> Vec<PilotView> {
        let mut held: BTreeMap<&PilotId, (u32, u32)> = BTreeMap::new();
        for cu in self.cus.values().filter(|c| c.holds_reservation()) {
            if let Some(p) = &cu.pilot {
                let e = held.entry(p).or_default();
                e.0 += cu.desc.cores;
                e.1 += 1;
            }
        }
        self.pilots
            .values()
            .filter(|p| p.state == PilotState::Running)
            .map(|p| {
                let (cores, load) = held.get(&p.desc.id).copied().unwrap_or_default();
                PilotView {
                    id: p.desc.id.clone(),
                    affinity: p.desc.affinity.clone(),
                    free_cores: p.desc.cores.saturating_sub(cores),
                    queued_load: load,
                }
            })
            .collect()
    }

    /// One scheduling epoch: binds eligible units and sends RUN_CU commands.
    pub fn run_epoch(&mut self, now: Tick) {
        self.epoch_requested = false;
        if self.stopped {
            return;
        }
        let eligible: Vec<CuId> = self
            .cu_order
            .iter()
            .filter(|id| {
                let e = &self.cus[*id];
                e.state == CuState::Unscheduled && e.desc.input_data.iter().all(|d| self.data.is_available(d))
            })
            .cloned()
            .collect();
        let views = self.pilot_views();
        if eligible.is_empty() || views.iter().all(|v| v.free_cores == 0) {
            return;
        }
        let epoch = self.scheduler.next_epoch();
        let placement = self.data.placement();
        let bindings = self.scheduler.plan(&eligible, &views, &placement);
        for b in bindings {
            let command_id = self.next_command_id();
            let mut bind_data = json!({ "pilot": b.pilot_id, "epoch": epoch, "command_id": command_id });
            if let Some(s) = &b.score {
                bind_data = merge(
                    bind_data,
                    json!({
                        "local_bytes": s.local_bytes,
                        "affinity_sum": s.affinity_sum,
                        "queued_load": s.queued_load,
                    }),
                );
            }
            self.ledger.note(
                now,
                EventKind::Bind,
                entity_key(EntityKind::Cu, b.cu_id.as_str()),
                bind_data,
            );
            self.cu_transition(
                &b.cu_id,
                CuState::Pending,
                now,
                json!({ "pilot": b.pilot_id, "epoch": epoch, "command_id": command_id }),
            );
            self.scheduler
                .mark_bound(&b.cu_id, b.pilot_id.clone(), now)
                .expect("planned units exist");
            let entry = self.cus.get_mut(&b.cu_id).expect("planned units exist");
            entry.pilot = Some(b.pilot_id.clone());
            entry.command_id = Some(command_id.clone());
            self.store
                .enqueue_command(Command::run_cu(command_id.clone(), b.pilot_id.clone(), b.cu_id.clone()))
                .expect("pilot queue registered at creation");
            if self.config.inject_duplicates {
                self.store
                    .inject_duplicate(&command_id)
                    .expect("command was just enqueued");
            }
            self.effects.push(Effect::Poll(b.pilot_id));
        }
    }

    /// The pilot's agent fetches and handles its pending commands, then
    /// admits what fits.
    pub fn agent_poll(&mut self, pilot: &PilotId, now: Tick) {
        if self.pilot_state(pilot) != Some(PilotState::Running) {
            return;
        }
        let commands = self
            .store
            .poll_commands(pilot, POLL_BATCH)
            .expect("pilot queue registered at creation");
        for cmd in commands {
            self.store
                .acknowledge(pilot, &cmd.command_id)
                .expect("pilot queue registered at creation");
            let directive = {
                let scheduler = &self.scheduler;
                let agent = &mut self.pilots.get_mut(pilot).expect("known pilot").agent;
                agent.handle(&cmd, |cu| scheduler.cores_of(cu))
            };
            match directive {
                Directive::Queued(cu) => {
                    let current = self.cus.get(&cu).is_some_and(|e| {
                        e.state == CuState::Pending
                            && e.pilot.as_ref() == Some(pilot)
                            && e.command_id.as_deref() == Some(cmd.command_id.as_str())
                    });
                    if !current {
                        self.pilots.get_mut(pilot).expect("known pilot").agent.dequeue(&cu);
                    }
                }
                Directive::Duplicate(id) => {
                    self.ledger.note(
                        now,
                        EventKind::Duplicate,
                        entity_key(EntityKind::Pilot, pilot.as_str()),
                        json!({ "command_id": id }),
                    );
                }
                Directive::CancelQueued(cu) => {
                    if self.cu_state(&cu) == Some(CuState::Pending) {
                        self.cu_transition(&cu, CuState::Canceled, now, json!({ "reason": "canceled" }));
                        self.request_epoch();
                    }
                }
                Directive::CancelActive(cu) => self.cancel_active(&cu, now),
                Directive::CancelUnknown(_) => {}
                Directive::Shutdown => {
                    self.release_pilot(pilot, PilotState::Canceled, "pilot canceled", now);
                    return;
                }
            }
        }
        self.admit(pilot, now);
    }

    fn admit(&mut self, pilot: &PilotId, now: Tick) {
        let Some(entry) = self.pilots.get_mut(pilot) else {
            return;
        };
        if entry.state != PilotState::Running {
            return;
        }
        for adm in entry.agent.admit() {
            self.begin_staging(&adm.cu_id, pilot, now);
        }
    }

    fn begin_staging(&mut self, cu: &CuId, pilot: &PilotId, now: Tick) {
        let entry = self.cus.get_mut(cu).expect("admitted unit exists");
        entry.attempt += 1;
        let attempt = entry.attempt;
        let inputs = entry.desc.input_data.clone();
        self.cu_transition(cu, CuState::Staging, now, json!({ "pilot": pilot, "attempt": attempt }));
        let mut waiting = BTreeSet::new();
        for du in inputs {
            match self.data.start_transfer(&self.ledger, &du, pilot, now) {
                Ok(TransferStart::Resident) => {}
                Ok(TransferStart::InFlight) => {
                    self.waiters
                        .entry((du.clone(), pilot.clone()))
                        .or_default()
                        .push((cu.clone(), attempt));
                    waiting.insert(du);
                }
                Ok(TransferStart::Started(pending)) => {
                    self.waiters
                        .entry((du.clone(), pilot.clone()))
                        .or_default()
                        .push((cu.clone(), attempt));
                    waiting.insert(du);
                    self.effects.push(Effect::Transfer(pending));
                }
                Err(err) => {
                    self.fail_cu(cu, "staging", json!({ "du": du, "error": err.to_string() }), false, now);
                    return;
                }
            }
        }
        if waiting.is_empty() {
            self.start_run(cu, now);
        } else {
            self.cus.get_mut(cu).expect("present").waiting = waiting;
        }
    }

    fn start_run(&mut self, cu: &CuId, now: Tick) {
        let entry = &self.cus[cu];
        let pilot = entry.pilot.clone().expect("staged units are bound");
        let attempt = entry.attempt;
        let command_id = entry.command_id.clone();
        let desc = entry.desc.clone();
        self.cu_transition(
            cu,
            CuState::Running,
            now,
            json!({ "pilot": pilot, "attempt": attempt, "command_id": command_id }),
        );
        let workdir = self.workdir(&pilot, cu);
        let inputs = if workdir.is_some() {
            let store = self.data.store(&pilot).expect("pilot store");
            desc.input_data
                .iter()
                .filter_map(|du| {
                    Some(StagedInput {
                        du_id: du.clone(),
                        store_dir: store.du_dir(du)?,
                        files: self.data.files_of(du)?.to_vec(),
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        self.effects.push(Effect::Execute(ExecRequest {
            cu: desc,
            pilot,
            attempt,
            workdir,
            inputs,
        }));
    }

    /// A transfer started by staging has landed (or failed, in local mode).
    pub fn transfer_done(&mut self, pending: PendingTransfer, outcome: Result<(), String>, now: Tick) {
        let du = pending.du_id.clone();
        let key = (du.clone(), pending.to.clone());
        let ok = match outcome {
            Ok(()) => match self.data.complete_transfer(&self.ledger, pending, now) {
                Ok(_) => true,
                Err(e) => {
                    self.warn(
                        now,
                        entity_key(EntityKind::Du, du.as_str()),
                        json!({ "error": e.to_string() }),
                    );
                    false
                }
            },
            Err(msg) => {
                if let Err(e) = self.data.abort_transfer(&self.ledger, &pending, now) {
                    log::error!("aborting transfer of {du}: {e}");
                }
                self.warn(now, entity_key(EntityKind::Du, du.as_str()), json!({ "error": msg }));
                false
            }
        };
        for (cu, attempt) in self.waiters.remove(&key).unwrap_or_default() {
            let entry = &self.cus[&cu];
            if entry.state != CuState::Staging || entry.attempt != attempt {
                continue;
            }
            if ok {
                let entry = self.cus.get_mut(&cu).expect("present");
                entry.waiting.remove(&du);
                if entry.waiting.is_empty() {
                    self.start_run(&cu, now);
                }
            } else {
                self.fail_cu(&cu, "staging", json!({ "du": du }), false, now);
            }
        }
        self.request_epoch();
    }

    /// An execution returned.
    pub fn finish_cu(&mut self, cu: &CuId, attempt: u32, result: BackendResult, now: Tick) {
        let Some(entry) = self.cus.get(cu) else { return };
        if entry.state != CuState::Running || entry.attempt != attempt {
            return;
        }
        let pilot = entry.pilot.clone().expect("running units are bound");
        let outputs = entry.desc.output_data.clone();
        self.pilots.get_mut(&pilot).expect("known pilot").agent.release(cu);
        if result.succeeded() {
            let workdir = self.workdir(&pilot, cu);
            for du in &outputs {
                if let Err(e) = self
                    .data
                    .register_output(&self.ledger, du, &pilot, workdir.as_deref(), now)
                {
                    self.warn(
                        now,
                        entity_key(EntityKind::Du, du.as_str()),
                        json!({ "cu": cu, "error": e.to_string() }),
                    );
                }
            }
            if let Some(dir) = &workdir {
                self.warn_undeclared(cu, dir, now);
            }
            self.cu_transition(
                cu,
                CuState::Done,
                now,
                json!({ "exit_code": 0, "duration_s": result.duration_s }),
            );
        } else {
            self.fail_cu(
                cu,
                "exit",
                json!({ "exit_code": result.exit_code, "duration_s": result.duration_s }),
                false,
                now,
            );
        }
        self.admit(&pilot, now);
        self.request_epoch();
    }

    /// The execution of `cu` could not start (local spawn error, missing
    /// duration).
    pub fn fail_running(&mut self, cu: &CuId, attempt: u32, reason: &str, detail: String, now: Tick) {
        let Some(entry) = self.cus.get(cu) else { return };
        if entry.state != CuState::Running || entry.attempt != attempt {
            return;
        }
        let pilot = entry.pilot.clone();
        self.fail_cu(cu, reason, json!({ "error": detail }), false, now);
        if let Some(p) = pilot {
            self.admit(&p, now);
        }
    }

    fn warn_undeclared(&self, cu: &CuId, dir: &Path, now: Tick) {
        let entry = &self.cus[cu];
        let mut expected: BTreeSet<String> = ["stdout", "stderr"].iter().map(|s| (*s).to_owned()).collect();
        expected.extend(entry.desc.input_data.iter().map(|d| d.to_string()));
        for du in &entry.desc.output_data {
            for f in self.data.files_of(du).unwrap_or_default() {
                if let Some(first) = Path::new(f).components().next() {
                    expected.insert(first.as_os_str().to_string_lossy().into_owned());
                }
            }
        }
        let Ok(listing) = fs::read_dir(dir) else { return };
        let mut extra: Vec<String> = listing
            .filter_map(Result::ok)
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|name| !expected.contains(name))
            .collect();
        extra.sort();
        for file in extra {
            self.warn(
                now,
                entity_key(EntityKind::Cu, cu.as_str()),
                json!({ "undeclared_output": file }),
            );
        }
    }

    /// Moves a STAGING or RUNNING unit to FAILED, frees its slots and
    /// applies the retry policy.
    fn fail_cu(&mut self, cu: &CuId, reason: &str, detail: Value, kill: bool, now: Tick) {
        let entry = &self.cus[cu];
        let pilot = entry.pilot.clone();
        let attempt = entry.attempt;
        if let Some(p) = &pilot {
            if let Some(pe) = self.pilots.get_mut(p) {
                pe.agent.release(cu);
            }
        }
        if kill {
            self.effects.push(Effect::Kill {
                cu: cu.clone(),
                attempt,
            });
        }
        let data = merge(json!({ "reason": reason, "pilot": pilot, "attempt": attempt }), detail);
        self.cu_transition(cu, CuState::Failed, now, data);
        self.retry(cu, now);
    }

    fn retry(&mut self, cu: &CuId, now: Tick) {
        let entry = &self.cus[cu];
        if entry.state == CuState::Failed && entry.retries < entry.desc.max_retries && !self.stopped {
            let n = entry.retries + 1;
            self.cu_transition(cu, CuState::Unscheduled, now, json!({ "retry": n }));
            self.unbind(cu);
            self.cus.get_mut(cu).expect("present").retries = n;
        }
        self.request_epoch();
    }

    fn unbind(&mut self, cu: &CuId) {
        let entry = self.cus.get_mut(cu).expect("present");
        entry.pilot = None;
        entry.command_id = None;
        entry.waiting.clear();
        self.scheduler.unbind(cu);
    }

    fn cancel_active(&mut self, cu: &CuId, now: Tick) {
        let entry = &self.cus[cu];
        let state = entry.state;
        if !matches!(state, CuState::Staging | CuState::Running) {
            return;
        }
        let attempt = entry.attempt;
        let pilot = entry.pilot.clone();
        if let Some(p) = &pilot {
            self.pilots.get_mut(p).expect("known pilot").agent.release(cu);
        }
        if state == CuState::Running {
            self.effects.push(Effect::Kill {
                cu: cu.clone(),
                attempt,
            });
        }
        self.cu_transition(cu, CuState::Canceled, now, json!({ "reason": "canceled" }));
        if let Some(p) = pilot {
            self.admit(&p, now);
        }
        self.request_epoch();
    }

    /// Ends a RUNNING pilot. Units waiting for admission are refunded to
    /// UNSCHEDULED; staging and running ones fail with `reason`.
    fn release_pilot(&mut self, pilot: &PilotId, to: PilotState, reason: &str, now: Tick) {
        let Some(entry) = self.pilots.get_mut(pilot) else {
            return;
        };
        if entry.state != PilotState::Running {
            return;
        }
        entry.agent.drain();
        let bound: Vec<CuId> = self
            .cu_order
            .iter()
            .filter(|id| {
                let e = &self.cus[*id];
                e.pilot.as_ref() == Some(pilot) && e.holds_reservation()
            })
            .cloned()
            .collect();
        for cu in bound {
            match self.cus[&cu].state {
                CuState::Pending => {
                    self.cu_transition(
                        &cu,
                        CuState::Unscheduled,
                        now,
                        json!({ "reason": reason, "refund": true }),
                    );
                    self.unbind(&cu);
                }
                CuState::Running => self.fail_cu(&cu, reason, Value::Null, true, now),
                _ => self.fail_cu(&cu, reason, Value::Null, false, now),
            }
        }
        self.pilot_transition(pilot, to, now, json!({ "reason": reason }));
        self.request_epoch();
    }

    /// The pilot's walltime expired.
    pub fn walltime(&mut self, pilot: &PilotId, now: Tick) {
        self.release_pilot(pilot, PilotState::Done, "walltime", now);
    }

    pub fn cancel(&mut self, target: &EntityRef, now: Tick) -> Result<(), ServiceError> {
        match target {
            EntityRef::Cu(id) => {
                let entry = self
                    .cus
                    .get(id)
                    .ok_or_else(|| ServiceError::UnknownEntity(target.key()))?;
                match entry.state {
                    s if s.is_terminal() => Err(ServiceError::AlreadyTerminal(target.key())),
                    CuState::New | CuState::Unscheduled => {
                        self.cu_transition(id, CuState::Canceled, now, json!({ "reason": "canceled" }));
                        Ok(())
                    }
                    _ => {
                        let pilot = entry.pilot.clone().expect("bound units have a pilot");
                        let command_id = self.next_command_id();
                        self.store
                            .enqueue_command(Command::cancel_cu(command_id, pilot.clone(), id.clone()))
                            .expect("pilot queue registered at creation");
                        self.effects.push(Effect::Poll(pilot));
                        Ok(())
                    }
                }
            }
            EntityRef::Pilot(id) => {
                let state = self
                    .pilot_state(id)
                    .ok_or_else(|| ServiceError::UnknownEntity(target.key()))?;
                match state {
                    s if s.is_terminal() => Err(ServiceError::AlreadyTerminal(target.key())),
                    PilotState::Running => {
                        let command_id = self.next_command_id();
                        self.store
                            .enqueue_command(Command::shutdown(command_id, id.clone()))
                            .expect("pilot queue registered at creation");
                        self.effects.push(Effect::Poll(id.clone()));
                        Ok(())
                    }
                    _ => {
                        self.pilot_transition(id, PilotState::Canceled, now, json!({ "reason": "canceled" }));
                        Ok(())
                    }
                }
            }
            EntityRef::Du(_) => Err(ServiceError::NotCancelable),
        }
    }

    /// Why `cu` can never run, if it is stuck for good.
    pub fn blocked_reason(&self, cu: &CuId) -> Option<&'static str> {
        self.blocked_depth(cu, 0)
    }

    fn blocked_depth(&self, cu: &CuId, depth: usize) -> Option<&'static str> {
        let entry = self.cus.get(cu)?;
        if entry.state != CuState::Unscheduled {
            return None;
        }
        let live: Vec<&PilotEntry> = self.pilots.values().filter(|p| !p.state.is_terminal()).collect();
        if live.is_empty() {
            return Some("no pilot");
        }
        if live.iter().all(|p| p.desc.cores < entry.desc.cores) {
            return Some("cores");
        }
        if depth > self.cus.len() {
            return Some("input");
        }
        for du in &entry.desc.input_data {
            if self.data.is_available(du) {
                continue;
            }
            let lost = self.data.is_lost(du)
                || match self.producers.get(du) {
                    Some(p) => self.cus[p].state.is_terminal() || self.blocked_depth(p, depth + 1).is_some(),
                    None => true,
                };
            if lost {
                return Some("input");
            }
        }
        None
    }

    /// Every unit is terminal or blocked for good.
    pub fn is_settled(&self) -> bool {
        self.cus
            .keys()
            .all(|id| self.cus[id].state.is_terminal() || self.blocked_reason(id).is_some())
    }

    pub fn report(&self) -> WaitReport {
        WaitReport {
            states: self.cus.iter().map(|(id, e)| (id.clone(), e.state)).collect(),
            unschedulable: self
                .cu_order
                .iter()
                .filter_map(|id| self.blocked_reason(id).map(|r| (id.clone(), r.to_owned())))
                .collect(),
        }
    }

    /// Logs an `unschedulable` event for each unbound unit. Units not
    /// explained by [`Kernel::blocked_reason`] are reported as `stalled`.
    pub fn report_unschedulable(&mut self, now: Tick) {
        for id in self.cu_order.clone() {
            if self.cus[&id].state != CuState::Unscheduled || self.reported.contains(&id) {
                continue;
            }
            let reason = self.blocked_reason(&id).unwrap_or("stalled");
            self.ledger.note(
                now,
                EventKind::Unschedulable,
                entity_key(EntityKind::Cu, id.as_str()),
                json!({ "reason": reason }),
            );
            self.reported.insert(id);
        }
    }

    /// Normal end of a run: bound units are canceled, running pilots finish
    /// and pilots that never started are canceled.
    pub fn shutdown(&mut self, now: Tick) {
        self.cancel_everything("shutdown", now);
        for id in self.pilots.keys().cloned().collect::<Vec<_>>() {
            match self.pilots[&id].state {
                PilotState::Running => {
                    self.pilot_transition(&id, PilotState::Done, now, json!({ "reason": "shutdown" }))
                }
                PilotState::New | PilotState::Queued => {
                    self.pilot_transition(&id, PilotState::Canceled, now, json!({ "reason": "shutdown" }))
                }
                _ => {}
            }
        }
        self.stopped = true;
        self.epoch_requested = false;
    }

    /// The run budget ran out: log a stop event and cancel everything.
    pub fn stop(&mut self, now: Tick) {
        self.ledger.note(
            now,
            EventKind::Stop,
            "run".to_owned(),
            json!({ "t_max_s": self.config.t_max_s }),
        );
        self.stopped = true;
        self.cancel_everything("t_max", now);
        for id in self.pilots.keys().cloned().collect::<Vec<_>>() {
            if !self.pilots[&id].state.is_terminal() {
                self.pilot_transition(&id, PilotState::Canceled, now, json!({ "reason": "t_max" }));
            }
        }
        self.epoch_requested = false;
    }

    fn cancel_everything(&mut self, reason: &str, now: Tick) {
        for id in self.cu_order.clone() {
            let entry = &self.cus[&id];
            let state = entry.state;
            if state.is_terminal() || (state == CuState::Unscheduled && self.reported.contains(&id)) {
                continue;
            }
            if state == CuState::Running {
                self.effects.push(Effect::Kill {
                    cu: id.clone(),
                    attempt: entry.attempt,
                });
            }
            if let Some(p) = entry.pilot.clone() {
                let agent = &mut self.pilots.get_mut(&p).expect("known pilot").agent;
                agent.release(&id);
                agent.dequeue(&id);
            }
            self.cu_transition(&id, CuState::Canceled, now, json!({ "reason": reason }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pilot(id: &str, cores: u32) -> PilotDescription {
        PilotDescription {
            id: id.into(),
            resource: "sim://a".into(),
            cores,
            walltime_s: 100,
            affinity: "a/r1".into(),
            store_capacity_bytes: 10_000_000,
            queue_delay_s: 0,
        }
    }

    fn cu(id: &str, d: f64) -> ComputeUnitDescription {
        let mut c = ComputeUnitDescription::new(id, "true");
        c.sim_duration_s = Some(d);
        c
    }

    fn kernel() -> Kernel {
        Kernel::new(KernelConfig::new(BackendKind::Sim))
    }

    #[test]
    fn late_binding_waits_for_a_running_pilot() {
        let mut k = kernel();
        k.submit_cu(cu("c1", 1.0), 0).unwrap();
        k.run_epoch(0);
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Unscheduled));
        k.create_pilot(pilot("p1", 1), 0).unwrap();
        assert!(matches!(k.take_effects()[0], Effect::Launch { .. }));
        k.run_epoch(0);
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Unscheduled));
        k.activate_pilot(&"p1".into(), 0);
        assert!(k.take_epoch_request());
        k.run_epoch(0);
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Pending));
    }

    #[test]
    fn duplicate_ids_and_unresolved_inputs() {
        let mut k = kernel();
        k.create_pilot(pilot("p1", 1), 0).unwrap();
        assert!(matches!(
            k.create_pilot(pilot("p1", 1), 0),
            Err(ServiceError::DuplicatePilotId(_))
        ));
        k.submit_cu(cu("c1", 1.0), 0).unwrap();
        assert!(matches!(
            k.submit_cu(cu("c1", 1.0), 0),
            Err(ServiceError::DuplicateCuId(_))
        ));
        let mut c2 = cu("c2", 1.0);
        c2.input_data = vec!["ghost".into()];
        assert!(matches!(k.submit_cu(c2, 0), Err(ServiceError::UnresolvedDu { .. })));
    }

    #[test]
    fn local_pilot_rejected_by_sim_kernel() {
        let mut k = kernel();
        let mut p = pilot("p1", 1);
        p.resource = "local://".into();
        assert!(matches!(k.create_pilot(p, 0), Err(ServiceError::BackendUnavailable(_))));
    }

    #[test]
    fn oversized_unit_is_blocked_on_cores() {
        let mut k = kernel();
        k.create_pilot(pilot("p1", 2), 0).unwrap();
        let mut big = cu("big", 1.0);
        big.cores = 4;
        k.submit_cu(big, 0).unwrap();
        assert_eq!(k.blocked_reason(&"big".into()), Some("cores"));
        let report = k.report();
        assert_eq!(
            report.unschedulable.get(&CuId::from("big")).map(String::as_str),
            Some("cores")
        );
        assert!(k.is_settled());
    }

    #[test]
    fn cancel_unbound_unit_sends_no_command() {
        let mut k = kernel();
        k.create_pilot(pilot("p1", 1), 0).unwrap();
        k.submit_cu(cu("c1", 1.0), 0).unwrap();
        k.take_effects();
        k.cancel(&EntityRef::Cu("c1".into()), 0).unwrap();
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Canceled));
        assert_eq!(k.store().queue_len(&"p1".into()), 0);
        assert!(k.take_effects().is_empty());
        assert!(matches!(
            k.cancel(&EntityRef::Cu("c1".into()), 0),
            Err(ServiceError::AlreadyTerminal(_))
        ));
        assert!(matches!(
            k.cancel(&EntityRef::Cu("zz".into()), 0),
            Err(ServiceError::UnknownEntity(_))
        ));
    }

    #[test]
    fn binding_reserves_cores_across_epochs() {
        let mut k = kernel();
        k.create_pilot(pilot("p1", 1), 0).unwrap();
        k.activate_pilot(&"p1".into(), 0);
        k.submit_cu(cu("c1", 1.0), 0).unwrap();
        k.submit_cu(cu("c2", 1.0), 0).unwrap();
        k.run_epoch(0);
        k.run_epoch(0);
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Pending));
        assert_eq!(k.cu_state(&"c2".into()), Some(CuState::Unscheduled));
        k.agent_poll(&"p1".into(), 0);
        assert_eq!(k.cu_state(&"c1".into()), Some(CuState::Running));
        assert_eq!(k.occupied_slots(&"p1".into()), 1);
    }
}
