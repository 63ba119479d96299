//! Pilot agents: slot accounting, command handling and the two execution
//! backends.

mod event_queue;
mod local;

pub use event_queue::{EventQueue, QueueError};
pub use local::{execute_local, ProcessGauge, SpawnFailure};

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{Command, CommandDedup, CommandKind};
use crate::model::{ComputeUnitDescription, CuId, PilotId, Tick};

/// Commands fetched per poll.
pub const POLL_BATCH: usize = 64;

/// Poll interval of local agents.
pub const LOCAL_POLL_INTERVAL: std::time::Duration = std::time::Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub pilot_id: PilotId,
    pub index: u32,
    pub occupant: Option<CuId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendResult {
    pub cu_id: CuId,
    pub exit_code: i32,
    pub duration_s: f64,
    pub stdout: Option<PathBuf>,
    pub stderr: Option<PathBuf>,
}

impl BackendResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("compute unit `{0}` has no sim_duration_s")]
pub struct MissingDuration(pub CuId);

/// Completion of a simulated unit admitted at `now`: the time it finishes
/// and its result. The caller puts the completion on the event queue.
pub fn execute_sim(cu: &ComputeUnitDescription, now: Tick) -> Result<(Tick, BackendResult), MissingDuration> {
    let ticks = cu.sim_ticks().ok_or_else(|| MissingDuration(cu.id.clone()))?;
    Ok((
        now + ticks,
        BackendResult {
            cu_id: cu.id.clone(),
            exit_code: i32::from(cu.sim_fail),
            duration_s: ticks as f64,
            stdout: None,
            stderr: None,
        },
    ))
}

/// A RUN_CU accepted by the agent and waiting for slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Admission {
    pub cu_id: CuId,
    pub cores: u32,
    pub command_id: String,
}

/// What the driver must do for one delivered command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Directive {
    /// RUN_CU accepted into the admission queue.
    Queued(CuId),
    /// CANCEL_CU for a unit still waiting for slots; it was removed.
    CancelQueued(CuId),
    /// CANCEL_CU for a unit that holds slots.
    CancelActive(CuId),
    /// CANCEL_CU for a unit this agent does not hold.
    CancelUnknown(CuId),
    Shutdown,
    /// Same command_id seen before; acknowledged and dropped.
    Duplicate(String),
}

/// Backend-independent agent state: slots, FIFO admission queue and the
/// command dedupe set.
#[derive(Debug)]
pub struct AgentCore {
    pilot_id: PilotId,
    slots: Vec<Slot>,
    queue: VecDeque<Admission>,
    active: BTreeMap<CuId, Admission>,
    dedup: CommandDedup,
}

impl AgentCore {
    pub fn new(pilot_id: PilotId, cores: u32) -> Self {
        let slots = (0..cores)
            .map(|index| Slot {
                pilot_id: pilot_id.clone(),
                index,
                occupant: None,
            })
            .collect();
        Self {
            pilot_id,
            slots,
            queue: VecDeque::new(),
            active: BTreeMap::new(),
            dedup: CommandDedup::default(),
        }
    }

    pub fn pilot_id(&self) -> &PilotId {
        &self.pilot_id
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn free_slots(&self) -> u32 {
        self.slots.iter().filter(|s| s.occupant.is_none()).count() as u32
    }

    pub fn occupied_by(&self, cu: &CuId) -> u32 {
        self.slots.iter().filter(|s| s.occupant.as_ref() == Some(cu)).count() as u32
    }

    pub fn is_active(&self, cu: &CuId) -> bool {
        self.active.contains_key(cu)
    }

    pub fn active(&self) -> impl Iterator<Item = &Admission> {
        self.active.values()
    }

    pub fn queued(&self) -> impl Iterator<Item = &Admission> {
        self.queue.iter()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.active.is_empty()
    }

    /// Interprets one delivered command. `cores_of` looks up a unit's
    /// core demand.
    pub fn handle(&mut self, cmd: &Command, cores_of: impl Fn(&CuId) -> u32) -> Directive {
        if !self.dedup.first_delivery(&cmd.command_id) {
            return Directive::Duplicate(cmd.command_id.clone());
        }
        match cmd.kind {
            CommandKind::RunCu => {
                let cu = cmd.payload.clone().expect("RUN_CU carries a CU id");
                let cores = cores_of(&cu);
                self.queue.push_back(Admission {
                    cu_id: cu.clone(),
                    cores,
                    command_id: cmd.command_id.clone(),
                });
                Directive::Queued(cu)
            }
            CommandKind::CancelCu => {
                let cu = cmd.payload.clone().expect("CANCEL_CU carries a CU id");
                if let Some(i) = self.queue.iter().position(|a| a.cu_id == cu) {
                    self.queue.remove(i);
                    Directive::CancelQueued(cu)
                } else if self.active.contains_key(&cu) {
                    Directive::CancelActive(cu)
                } else {
                    Directive::CancelUnknown(cu)
                }
            }
            CommandKind::Shutdown => Directive::Shutdown,
        }
    }

    /// Admits queued units in FIFO order while the head fits. A head that
    /// does not fit blocks those behind it.
    pub fn admit(&mut self) -> Vec<Admission> {
        let mut out = Vec::new();
        while let Some(head) = self.queue.front() {
            if head.cores > self.free_slots() {
                break;
            }
            let adm = self.queue.pop_front().expect("non-empty");
            let mut need = adm.cores;
            for slot in self.slots.iter_mut().filter(|s| s.occupant.is_none()) {
                if need == 0 {
                    break;
                }
                slot.occupant = Some(adm.cu_id.clone());
                need -= 1;
            }
            self.active.insert(adm.cu_id.clone(), adm.clone());
            out.push(adm);
        }
        out
    }

    /// Frees the slots held by `cu`.
    pub fn release(&mut self, cu: &CuId) -> bool {
        for slot in &mut self.slots {
            if slot.occupant.as_ref() == Some(cu) {
                slot.occupant = None;
            }
        }
        self.active.remove(cu).is_some()
    }

    /// Drops a queued (not yet admitted) unit.
    pub fn dequeue(&mut self, cu: &CuId) -> bool {
        match self.queue.iter().position(|a| &a.cu_id == cu) {
            Some(i) => {
                self.queue.remove(i);
                true
            }
            None => false,
        }
    }

    /// Empties the agent, returning (queued, active) units.
    pub fn drain(&mut self) -> (Vec<Admission>, Vec<Admission>) {
        let queued = self.queue.drain(..).collect();
        let active = std::mem::take(&mut self.active).into_values().collect();
        for slot in &mut self.slots {
            slot.occupant = None;
        }
        (queued, active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(id: &str, cu: &str) -> Command {
        Command::run_cu(id, "p1".into(), cu.into())
    }

    #[test]
    fn third_unit_waits_for_a_slot() {
        let mut a = AgentCore::new("p1".into(), 2);
        for (i, c) in ["c1", "c2", "c3"].iter().enumerate() {
            assert_eq!(
                a.handle(&run(&format!("k{i}"), c), |_| 1),
                Directive::Queued((*c).into())
            );
        }
        let first: Vec<_> = a.admit().into_iter().map(|x| x.cu_id).collect();
        assert_eq!(first, vec![CuId::from("c1"), CuId::from("c2")]);
        assert_eq!(a.free_slots(), 0);
        assert!(a.admit().is_empty());
        a.release(&"c1".into());
        let next: Vec<_> = a.admit().into_iter().map(|x| x.cu_id).collect();
        assert_eq!(next, vec![CuId::from("c3")]);
    }

    #[test]
    fn duplicate_delivery_is_dropped() {
        let mut a = AgentCore::new("p1".into(), 2);
        assert_eq!(a.handle(&run("k1", "c1"), |_| 1), Directive::Queued("c1".into()));
        assert_eq!(a.handle(&run("k1", "c1"), |_| 1), Directive::Duplicate("k1".into()));
        assert_eq!(a.admit().len(), 1);
        assert!(a.admit().is_empty());
    }

    #[test]
    fn multicore_units_take_distinct_slots_and_block_fifo() {
        let mut a = AgentCore::new("p1".into(), 3);
        a.handle(&run("k1", "big"), |_| 2);
        a.handle(&run("k2", "huge"), |_| 3);
        a.handle(&run("k3", "small"), |_| 1);
        let got: Vec<_> = a.admit().into_iter().map(|x| x.cu_id).collect();
        assert_eq!(got, vec![CuId::from("big")]);
        assert_eq!(a.occupied_by(&"big".into()), 2);
        // "huge" blocks "small" even though one slot is free
        assert_eq!(a.free_slots(), 1);
        assert!(a.admit().is_empty());
    }

    #[test]
    fn cancel_directives() {
        let mut a = AgentCore::new("p1".into(), 1);
        a.handle(&run("k1", "c1"), |_| 1);
        a.handle(&run("k2", "c2"), |_| 1);
        a.admit();
        let cancel = |id: &str, cu: &str| Command::cancel_cu(id, "p1".into(), cu.into());
        assert_eq!(
            a.handle(&cancel("x1", "c2"), |_| 1),
            Directive::CancelQueued("c2".into())
        );
        assert_eq!(
            a.handle(&cancel("x2", "c1"), |_| 1),
            Directive::CancelActive("c1".into())
        );
        assert_eq!(
            a.handle(&cancel("x3", "zz"), |_| 1),
            Directive::CancelUnknown("zz".into())
        );
        assert_eq!(
            a.handle(&Command::shutdown("s", "p1".into()), |_| 1),
            Directive::Shutdown
        );
    }

    #[test]
    fn sim_execution_clock() {
        let mut cu = ComputeUnitDescription::new("c1", "true");
        cu.sim_duration_s = Some(5.0);
        let (at, res) = execute_sim(&cu, 3).unwrap();
        assert_eq!(at, 8);
        assert!(res.succeeded());
        cu.sim_fail = true;
        assert_eq!(execute_sim(&cu, 3).unwrap().1.exit_code, 1);
        cu.sim_duration_s = None;
        assert_eq!(execute_sim(&cu, 0).unwrap_err(), MissingDuration("c1".into()));
    }
}
