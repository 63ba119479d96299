//! Entity state records and the append-only event log.
//!
//! Every state change goes through [`Ledger::transition`], which checks the
//! edge against the entity's state machine, writes the new record to the
//! coordination store with compare-and-swap, and appends one event to the
//! log, all under a single lock so log order is a valid linearization.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coordination::{CoordError, CoordinationStore};
use crate::model::{entity_key, BackendKind, CuState, DuState, EntityKind, Lifecycle, PilotId, PilotState, Tick};

pub const SCHEMA_VERSION: u32 = 1;

/// Serialized value of a `kind/id` state record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntityRecord {
    Pilot {
        state: PilotState,
        t: Tick,
    },
    Cu {
        state: CuState,
        retry_count: u32,
        max_retries: u32,
        t: Tick,
    },
    Du {
        state: DuState,
        replicas: BTreeSet<PilotId>,
        t: Tick,
    },
}

impl EntityRecord {
    pub fn new_pilot(t: Tick) -> Self {
        EntityRecord::Pilot {
            state: PilotState::New,
            t,
        }
    }

    pub fn new_cu(max_retries: u32, t: Tick) -> Self {
        EntityRecord::Cu {
            state: CuState::New,
            retry_count: 0,
            max_retries,
            t,
        }
    }

    pub fn new_du(t: Tick) -> Self {
        EntityRecord::Du {
            state: DuState::New,
            replicas: BTreeSet::new(),
            t,
        }
    }

    pub fn kind(&self) -> EntityKind {
        match self {
            EntityRecord::Pilot { .. } => EntityKind::Pilot,
            EntityRecord::Cu { .. } => EntityKind::Cu,
            EntityRecord::Du { .. } => EntityKind::Du,
        }
    }

    pub fn t(&self) -> Tick {
        match self {
            EntityRecord::Pilot { t, .. } | EntityRecord::Cu { t, .. } | EntityRecord::Du { t, .. } => *t,
        }
    }

    fn set_t(&mut self, now: Tick) {
        match self {
            EntityRecord::Pilot { t, .. } | EntityRecord::Cu { t, .. } | EntityRecord::Du { t, .. } => *t = now,
        }
    }

    pub fn state_name(&self) -> &'static str {
        match self {
            EntityRecord::Pilot { state, .. } => state.name(),
            EntityRecord::Cu { state, .. } => state.name(),
            EntityRecord::Du { state, .. } => state.name(),
        }
    }

    pub fn retry_count(&self) -> u32 {
        match self {
            EntityRecord::Cu { retry_count, .. } => *retry_count,
            _ => 0,
        }
    }

    pub fn replicas(&self) -> Option<&BTreeSet<PilotId>> {
        match self {
            EntityRecord::Du { replicas, .. } => Some(replicas),
            _ => None,
        }
    }
}

/// Typed access to the state field of an [`EntityRecord`].
pub trait RecordState: Lifecycle {
    fn read(record: &EntityRecord) -> Option<Self>;
    /// Applies `to`, enforcing data-dependent guards.
    fn write(record: &mut EntityRecord, to: Self) -> Result<(), &'static str>;
}

impl RecordState for PilotState {
    fn read(record: &EntityRecord) -> Option<Self> {
        match record {
            EntityRecord::Pilot { state, .. } => Some(*state),
            _ => None,
        }
    }

    fn write(record: &mut EntityRecord, to: Self) -> Result<(), &'static str> {
        if let EntityRecord::Pilot { state, .. } = record {
            *state = to;
        }
        Ok(())
    }
}

impl RecordState for CuState {
    fn read(record: &EntityRecord) -> Option<Self> {
        match record {
            EntityRecord::Cu { state, .. } => Some(*state),
            _ => None,
        }
    }

    fn write(record: &mut EntityRecord, to: Self) -> Result<(), &'static str> {
        if let EntityRecord::Cu {
            state,
            retry_count,
            max_retries,
            ..
        } = record
        {
            if *state == CuState::Failed && to == CuState::Unscheduled {
                if *retry_count >= *max_retries {
                    return Err("retry budget exhausted");
                }
                *retry_count += 1;
            }
            *state = to;
        }
        Ok(())
    }
}

impl RecordState for DuState {
    fn read(record: &EntityRecord) -> Option<Self> {
        match record {
            EntityRecord::Du { state, .. } => Some(*state),
            _ => None,
        }
    }

    fn write(record: &mut EntityRecord, to: Self) -> Result<(), &'static str> {
        if let EntityRecord::Du { state, replicas, .. } = record {
            if to == DuState::Ready && replicas.is_empty() {
                return Err("READY requires at least one replica");
            }
            *state = to;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Entity registered; `to` is its initial state.
    Create,
    Transition,
    /// A schedulable unit was bound to a pilot.
    Bind,
    /// A completed data transfer.
    Transfer,
    /// A complete replica landed in a store.
    Replica,
    /// A command delivered more than once was dropped by the agent.
    Duplicate,
    Warning,
    /// A compute unit that can never be placed.
    Unschedulable,
    /// The run was stopped by its time budget.
    Stop,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub t: Tick,
    pub kind: EventKind,
    pub entity: String,
    pub from: Option<String>,
    pub to: Option<String>,
    #[serde(default)]
    pub data: Value,
}

impl Event {
    /// Splits `kind/id`.
    pub fn entity_parts(&self) -> Option<(EntityKind, &str)> {
        let (prefix, id) = self.entity.split_once('/')?;
        Some((EntityKind::from_prefix(prefix)?, id))
    }

    pub fn data_str(&self, field: &str) -> Option<&str> {
        self.data.get(field).and_then(Value::as_str)
    }

    pub fn data_u64(&self, field: &str) -> Option<u64> {
        self.data.get(field).and_then(Value::as_u64)
    }
}

/// First line of every log file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: u32,
    pub backend: BackendKind,
    pub time_unit: String,
    pub seed: Option<u64>,
    /// Run budget in seconds, when one was configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max_s: Option<u64>,
}

impl LogHeader {
    pub fn new(backend: BackendKind, seed: Option<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            backend,
            time_unit: backend.time_unit().to_owned(),
            seed,
            t_max_s: None,
        }
    }

    pub fn with_t_max(mut self, t_max_s: Option<u64>) -> Self {
        self.t_max_s = t_max_s;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum LogReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("empty log")]
    Empty,
}

impl EventLog {
    pub fn new(header: LogHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
        }
    }

    /// JSON-lines body without the header, one event per line.
    pub fn body_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        w.write_all(self.body_jsonl().as_bytes())?;
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogReadError> {
        let mut lines = r.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(LogReadError::Empty),
                Some((_, line)) if line.as_ref().is_ok_and(|l| l.trim().is_empty()) => continue,
                Some((i, line)) => {
                    break serde_json::from_str::<LogHeader>(&line?)
                        .map_err(|source| LogReadError::Json { line: i + 1, source })?
                }
            }
        };
        let mut events = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|source| LogReadError::Json { line: i + 1, source })?);
        }
        Ok(Self { header, events })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransitionError {
    #[error("illegal transition {from} -> {to} for {entity}")]
    IllegalTransition {
        entity: String,
        from: &'static str,
        to: &'static str,
    },
    #[error("stale transition for {entity}: expected {expected}, found {actual}")]
    StaleFrom {
        entity: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("entity {0} already exists")]
    AlreadyExists(String),
    #[error("timestamp {t} precedes last event {last} for {entity}")]
    TimeRegression { entity: String, last: Tick, t: Tick },
    #[error("{entity}: {reason}")]
    Guard { entity: String, reason: &'static str },
}

/// State gatekeeper shared by the manager and all agents.
pub struct Ledger {
    store: Arc<dyn CoordinationStore>,
    log: Mutex<EventLog>,
}

impl Ledger {
    pub fn new(store: Arc<dyn CoordinationStore>, header: LogHeader) -> Self {
        Self {
            store,
            log: Mutex::new(EventLog::new(header)),
        }
    }

    pub fn store(&self) -> &Arc<dyn CoordinationStore> {
        &self.store
    }

    fn load(&self, key: &str) -> Option<(EntityRecord, u64)> {
        let rec = self.store.get(key)?;
        let value = serde_json::from_str(&rec.value).expect("ledger records are well-formed");
        Some((value, rec.version))
    }

    pub fn record(&self, kind: EntityKind, id: &str) -> Option<EntityRecord> {
        self.load(&entity_key(kind, id)).map(|(r, _)| r)
    }

    pub fn state<S: RecordState>(&self, id: &str) -> Option<S> {
        self.record(S::KIND, id).and_then(|r| S::read(&r))
    }

    /// Registers a new entity in its initial state.
    pub fn create(&self, id: &str, record: EntityRecord, data: Value) -> Result<(), TransitionError> {
        let key = entity_key(record.kind(), id);
        let mut log = self.log.lock();
        let value = serde_json::to_string(&record).expect("record serializes");
        self.store
            .cas_put(&key, 0, value)
            .map_err(|_| TransitionError::AlreadyExists(key.clone()))?;
        let t = record.t();
        push(
            &mut log,
            t,
            EventKind::Create,
            key,
            None,
            Some(record.state_name().to_owned()),
            data,
        );
        Ok(())
    }

    /// Moves entity `id` from `from` to `to` at time `t`.
    pub fn transition<S: RecordState>(
        &self,
        id: &str,
        from: S,
        to: S,
        t: Tick,
        data: Value,
    ) -> Result<EntityRecord, TransitionError> {
        let key = entity_key(S::KIND, id);
        let mut log = self.log.lock();
        let (mut record, version) = self
            .load(&key)
            .ok_or_else(|| TransitionError::UnknownEntity(key.clone()))?;
        let current = S::read(&record).ok_or_else(|| TransitionError::UnknownEntity(key.clone()))?;
        if current != from {
            return Err(TransitionError::StaleFrom {
                entity: key,
                expected: from.name(),
                actual: current.name(),
            });
        }
        if !from.can_become(to) {
            return Err(TransitionError::IllegalTransition {
                entity: key,
                from: from.name(),
                to: to.name(),
            });
        }
        if t < record.t() {
            return Err(TransitionError::TimeRegression {
                entity: key,
                last: record.t(),
                t,
            });
        }
        S::write(&mut record, to).map_err(|reason| TransitionError::Guard {
            entity: key.clone(),
            reason,
        })?;
        record.set_t(t);
        let value = serde_json::to_string(&record).expect("record serializes");
        match self.store.cas_put(&key, version, value) {
            Ok(_) => {}
            Err(CoordError::VersionConflict { .. }) => {
                // another writer bypassed the ledger lock (e.g. a second ledger)
                let actual = self.load(&key).and_then(|(r, _)| S::read(&r)).map_or("?", |s| s.name());
                return Err(TransitionError::StaleFrom {
                    entity: key,
                    expected: from.name(),
                    actual,
                });
            }
            Err(other) => panic!("unexpected store error: {other}"),
        }
        push(
            &mut log,
            t,
            EventKind::Transition,
            key,
            Some(from.name().to_owned()),
            Some(to.name().to_owned()),
            data,
        );
        Ok(record)
    }

    /// Adds a replica to a data unit's record and logs it.
    pub fn add_replica(&self, du: &str, pilot: &PilotId, t: Tick, data: Value) -> Result<(), TransitionError> {
        let key = entity_key(EntityKind::Du, du);
        let mut log = self.log.lock();
        let (mut record, version) = self
            .load(&key)
            .ok_or_else(|| TransitionError::UnknownEntity(key.clone()))?;
        if t < record.t() {
            return Err(TransitionError::TimeRegression {
                entity: key,
                last: record.t(),
                t,
            });
        }
        if let EntityRecord::Du { replicas, .. } = &mut record {
            replicas.insert(pilot.clone());
        }
        record.set_t(t);
        let value = serde_json::to_string(&record).expect("record serializes");
        self.store
            .cas_put(&key, version, value)
            .expect("ledger lock serializes record writes");
        push(&mut log, t, EventKind::Replica, key, None, None, data);
        Ok(())
    }

    /// Appends an event that carries no state change.
    pub fn note(&self, t: Tick, kind: EventKind, entity: String, data: Value) {
        let mut log = self.log.lock();
        push(&mut log, t, kind, entity, None, None, data);
    }

    pub fn snapshot(&self) -> EventLog {
        self.log.lock().clone()
    }

    pub fn event_count(&self) -> usize {
        self.log.lock().events.len()
    }
}

fn push(
    log: &mut EventLog,
    t: Tick,
    kind: EventKind,
    entity: String,
    from: Option<String>,
    to: Option<String>,
    data: Value,
) {
    let seq = log.events.len() as u64;
    log.events.push(Event {
        seq,
        t,
        kind,
        entity,
        from,
        to,
        data,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::InMemoryStore;
    use serde_json::json;

    fn ledger() -> Ledger {
        Ledger::new(
            Arc::new(InMemoryStore::new()),
            LogHeader::new(BackendKind::Sim, Some(1)),
        )
    }

    fn cu_at_unscheduled(l: &Ledger, max_retries: u32) {
        l.create("c1", EntityRecord::new_cu(max_retries, 0), Value::Null)
            .unwrap();
        l.transition("c1", CuState::New, CuState::Unscheduled, 0, Value::Null)
            .unwrap();
    }

    #[test]
    fn legal_edge_recorded() {
        let l = ledger();
        cu_at_unscheduled(&l, 0);
        l.transition("c1", CuState::Unscheduled, CuState::Pending, 5, Value::Null)
            .unwrap();
        assert_eq!(l.state::<CuState>("c1"), Some(CuState::Pending));
        let log = l.snapshot();
        let last = log.events.last().unwrap();
        assert_eq!(
            (last.t, last.from.as_deref(), last.to.as_deref()),
            (5, Some("UNSCHEDULED"), Some("PENDING"))
        );
        assert_eq!(last.entity, "cu/c1");
        assert_eq!(l.store().get("cu/c1").unwrap().version, 3);
    }

    #[test]
    fn illegal_edge_rejected() {
        let l = ledger();
        cu_at_unscheduled(&l, 0);
        assert!(matches!(
            l.transition("c1", CuState::Unscheduled, CuState::Running, 5, Value::Null),
            Err(TransitionError::IllegalTransition { .. })
        ));
        assert_eq!(l.state::<CuState>("c1"), Some(CuState::Unscheduled));
    }

    #[test]
    fn stale_from_and_time_regression() {
        let l = ledger();
        cu_at_unscheduled(&l, 0);
        assert!(matches!(
            l.transition("c1", CuState::Pending, CuState::Staging, 1, Value::Null),
            Err(TransitionError::StaleFrom {
                actual: "UNSCHEDULED",
                ..
            })
        ));
        l.transition("c1", CuState::Unscheduled, CuState::Pending, 9, Value::Null)
            .unwrap();
        assert!(matches!(
            l.transition("c1", CuState::Pending, CuState::Staging, 8, Value::Null),
            Err(TransitionError::TimeRegression { last: 9, t: 8, .. })
        ));
    }

    #[test]
    fn retry_budget_guard() {
        let l = ledger();
        cu_at_unscheduled(&l, 1);
        let fail_once = |t| {
            l.transition("c1", CuState::Unscheduled, CuState::Pending, t, Value::Null)
                .unwrap();
            l.transition("c1", CuState::Pending, CuState::Staging, t, Value::Null)
                .unwrap();
            l.transition("c1", CuState::Staging, CuState::Running, t, Value::Null)
                .unwrap();
            l.transition("c1", CuState::Running, CuState::Failed, t, Value::Null)
                .unwrap();
        };
        fail_once(1);
        let rec = l
            .transition("c1", CuState::Failed, CuState::Unscheduled, 1, Value::Null)
            .unwrap();
        assert_eq!(rec.retry_count(), 1);
        fail_once(2);
        assert!(matches!(
            l.transition("c1", CuState::Failed, CuState::Unscheduled, 2, Value::Null),
            Err(TransitionError::Guard { .. })
        ));
    }

    #[test]
    fn ready_requires_replica() {
        let l = ledger();
        l.create("d1", EntityRecord::new_du(0), Value::Null).unwrap();
        l.transition("d1", DuState::New, DuState::Transferring, 0, Value::Null)
            .unwrap();
        assert!(l
            .transition("d1", DuState::Transferring, DuState::Ready, 0, Value::Null)
            .is_err());
        l.add_replica("d1", &"p1".into(), 0, json!({"pilot": "p1", "bytes": 1}))
            .unwrap();
        l.transition("d1", DuState::Transferring, DuState::Ready, 0, Value::Null)
            .unwrap();
    }

    #[test]
    fn two_writer_race_yields_one_stale() {
        // both writers believe the pilot is RUNNING; exactly one wins
        for _ in 0..50 {
            let l = Arc::new(ledger());
            l.create("p1", EntityRecord::new_pilot(0), Value::Null).unwrap();
            l.transition("p1", PilotState::New, PilotState::Queued, 0, Value::Null)
                .unwrap();
            l.transition("p1", PilotState::Queued, PilotState::Running, 1, Value::Null)
                .unwrap();
            let barrier = Arc::new(std::sync::Barrier::new(2));
            let spawn = |to: PilotState| {
                let l = Arc::clone(&l);
                let b = Arc::clone(&barrier);
                std::thread::spawn(move || {
                    b.wait();
                    l.transition("p1", PilotState::Running, to, 9, Value::Null)
                })
            };
            let done = spawn(PilotState::Done);
            let cancel = spawn(PilotState::Canceled);
            let results = [done.join().unwrap(), cancel.join().unwrap()];
            let stale = results
                .iter()
                .filter(|r| matches!(r, Err(TransitionError::StaleFrom { .. })))
                .count();
            assert_eq!(stale, 1);
            assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let l = ledger();
        cu_at_unscheduled(&l, 0);
        let log = l.snapshot();
        let text = log.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"schema_version\":1"));
        let back = EventLog::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, log);
    }
}
