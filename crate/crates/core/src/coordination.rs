//! The command-and-control channel: versioned state records plus per-pilot
//! command queues shared between the manager and the agents.
//!
//! Records are guarded by compare-and-swap on a per-key version. Commands are
//! delivered at-least-once in per-pilot FIFO order: `poll_commands` returns
//! without removing and `acknowledge` removes, so an agent that crashes
//! between the two sees the same commands again. Agents must deduplicate
//! by `command_id`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Barrier};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CuId, PilotId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub key: String,
    pub value: String,
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    RunCu,
    CancelCu,
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub command_id: String,
    pub pilot_id: PilotId,
    pub kind: CommandKind,
    pub payload: Option<CuId>,
}

impl Command {
    pub fn run_cu(command_id: impl Into<String>, pilot: PilotId, cu: CuId) -> Self {
        Self {
            command_id: command_id.into(),
            pilot_id: pilot,
            kind: CommandKind::RunCu,
            payload: Some(cu),
        }
    }

    pub fn cancel_cu(command_id: impl Into<String>, pilot: PilotId, cu: CuId) -> Self {
        Self {
            command_id: command_id.into(),
            pilot_id: pilot,
            kind: CommandKind::CancelCu,
            payload: Some(cu),
        }
    }

    pub fn shutdown(command_id: impl Into<String>, pilot: PilotId) -> Self {
        Self {
            command_id: command_id.into(),
            pilot_id: pilot,
            kind: CommandKind::Shutdown,
            payload: None,
        }
    }

    fn well_formed(&self) -> bool {
        match self.kind {
            CommandKind::RunCu | CommandKind::CancelCu => self.payload.is_some(),
            CommandKind::Shutdown => self.payload.is_none(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoordError {
    #[error("version conflict on `{key}`: expected {expected}, current {current}")]
    VersionConflict { key: String, expected: u64, current: u64 },
    #[error("unknown pilot `{0}`")]
    UnknownPilot(PilotId),
    #[error("duplicate command id `{0}`")]
    DuplicateCommand(String),
    #[error("unknown command id `{0}`")]
    UnknownCommand(String),
    #[error("malformed command `{0}`")]
    MalformedCommand(String),
}

/// Shared coordination substrate. Implementations must be linearizable per
/// key and preserve per-pilot enqueue order.
pub trait CoordinationStore: Send + Sync {
    fn get(&self, key: &str) -> Option<StateRecord>;

    /// Stores `value` iff the key's current version equals
    /// `expected_version` (0 means "absent"), returning the new version.
    fn cas_put(&self, key: &str, expected_version: u64, value: String) -> Result<u64, CoordError>;

    fn register_pilot(&self, pilot: &PilotId);

    fn enqueue_command(&self, cmd: Command) -> Result<(), CoordError>;

    /// Up to `max_n` oldest unacknowledged commands, left in place.
    fn poll_commands(&self, pilot: &PilotId, max_n: usize) -> Result<Vec<Command>, CoordError>;

    /// Removes the oldest queued copy of `command_id`. Returns false when no
    /// copy was queued.
    fn acknowledge(&self, pilot: &PilotId, command_id: &str) -> Result<bool, CoordError>;
}

#[derive(Default)]
struct Queues {
    pending: HashMap<PilotId, VecDeque<Command>>,
    issued: HashMap<String, Command>,
}

/// In-process store.
#[derive(Default)]
pub struct InMemoryStore {
    records: Mutex<HashMap<String, StateRecord>>,
    queues: Mutex<Queues>,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Re-appends a copy of an already issued command to its pilot's queue,
    /// as an unreliable transport would. Used to exercise agent dedupe.
    pub fn inject_duplicate(&self, command_id: &str) -> Result<(), CoordError> {
        let mut q = self.queues.lock();
        let cmd = q
            .issued
            .get(command_id)
            .cloned()
            .ok_or_else(|| CoordError::UnknownCommand(command_id.to_owned()))?;
        q.pending
            .get_mut(&cmd.pilot_id)
            .ok_or_else(|| CoordError::UnknownPilot(cmd.pilot_id.clone()))?
            .push_back(cmd);
        Ok(())
    }

    pub fn queue_len(&self, pilot: &PilotId) -> usize {
        self.queues.lock().pending.get(pilot).map_or(0, VecDeque::len)
    }

    /// Keys currently stored, unordered.
    pub fn keys(&self) -> Vec<String> {
        self.records.lock().keys().cloned().collect()
    }
}

impl CoordinationStore for InMemoryStore {
    fn get(&self, key: &str) -> Option<StateRecord> {
        self.records.lock().get(key).cloned()
    }

    fn cas_put(&self, key: &str, expected_version: u64, value: String) -> Result<u64, CoordError> {
        let mut records = self.records.lock();
        let current = records.get(key).map_or(0, |r| r.version);
        if current != expected_version {
            return Err(CoordError::VersionConflict {
                key: key.to_owned(),
                expected: expected_version,
                current,
            });
        }
        let version = current + 1;
        records.insert(
            key.to_owned(),
            StateRecord {
                key: key.to_owned(),
                value,
                version,
            },
        );
        Ok(version)
    }

    fn register_pilot(&self, pilot: &PilotId) {
        self.queues.lock().pending.entry(pilot.clone()).or_default();
    }

    fn enqueue_command(&self, cmd: Command) -> Result<(), CoordError> {
        if !cmd.well_formed() {
            return Err(CoordError::MalformedCommand(cmd.command_id));
        }
        let mut q = self.queues.lock();
        if !q.pending.contains_key(&cmd.pilot_id) {
            return Err(CoordError::UnknownPilot(cmd.pilot_id));
        }
        if q.issued.contains_key(&cmd.command_id) {
            return Err(CoordError::DuplicateCommand(cmd.command_id));
        }
        q.issued.insert(cmd.command_id.clone(), cmd.clone());
        q.pending.get_mut(&cmd.pilot_id).unwrap().push_back(cmd);
        Ok(())
    }

    fn poll_commands(&self, pilot: &PilotId, max_n: usize) -> Result<Vec<Command>, CoordError> {
        let q = self.queues.lock();
        let queue = q
            .pending
            .get(pilot)
            .ok_or_else(|| CoordError::UnknownPilot(pilot.clone()))?;
        Ok(queue.iter().take(max_n).cloned().collect())
    }

    fn acknowledge(&self, pilot: &PilotId, command_id: &str) -> Result<bool, CoordError> {
        let mut q = self.queues.lock();
        let queue = q
            .pending
            .get_mut(pilot)
            .ok_or_else(|| CoordError::UnknownPilot(pilot.clone()))?;
        match queue.iter().position(|c| c.command_id == command_id) {
            Some(i) => {
                queue.remove(i);
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

/// Outcome of [`cas_stress`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CasStress {
    pub successes: u64,
    pub conflicts: u64,
    /// Version written by each successful CAS, sorted.
    pub won_versions: Vec<u64>,
    pub final_version: u64,
}

impl CasStress {
    /// One winner per version and no lost or phantom writes.
    pub fn is_consistent(&self) -> bool {
        let expected: Vec<u64> = (2..=self.successes + 1).collect();
        self.won_versions == expected && self.final_version == self.successes + 1
    }
}

/// Creates `key`, then lets `writers` threads race read-then-CAS on it
/// `rounds` times each, released together by a barrier.
pub fn cas_stress(store: &Arc<dyn CoordinationStore>, key: &str, writers: usize, rounds: usize) -> CasStress {
    store
        .cas_put(key, 0, "0".into())
        .expect("stress key must not exist yet");
    let barrier = Arc::new(Barrier::new(writers));
    let handles: Vec<_> = (0..writers)
        .map(|w| {
            let store = Arc::clone(store);
            let barrier = Arc::clone(&barrier);
            let key = key.to_owned();
            std::thread::spawn(move || {
                barrier.wait();
                let mut won = Vec::new();
                let mut conflicts = 0;
                for r in 0..rounds {
                    let Some(rec) = store.get(&key) else { continue };
                    // widen the read-to-write window so writers actually collide
                    std::thread::yield_now();
                    match store.cas_put(&key, rec.version, format!("{w}:{r}")) {
                        Ok(v) => won.push(v),
                        Err(_) => conflicts += 1,
                    }
                }
                (won, conflicts)
            })
        })
        .collect();
    let mut won_versions = Vec::new();
    let mut conflicts = 0;
    for h in handles {
        let (won, c) = h.join().expect("writer panicked");
        won_versions.extend(won);
        conflicts += c;
    }
    won_versions.sort_unstable();
    CasStress {
        successes: won_versions.len() as u64,
        conflicts,
        won_versions,
        final_version: store.get(key).map_or(0, |r| r.version),
    }
}

/// Seen-set used by agents to execute each command at most once.
#[derive(Debug, Default)]
pub struct CommandDedup {
    seen: HashSet<String>,
}

impl CommandDedup {
    /// True the first time `command_id` is observed.
    pub fn first_delivery(&mut self, command_id: &str) -> bool {
        self.seen.insert(command_id.to_owned())
    }
}
