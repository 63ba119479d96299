//! Single-threaded discrete-event driver for the sim backend.
//!
//! Scheduling epochs are coalesced: at most one epoch event is queued per
//! virtual instant, behind whatever else is already queued for that instant.
//! Walltime timers do not keep a run alive; the run is over once no other
//! event is pending.

use std::collections::BTreeSet;

use crate::agent::{execute_sim, BackendResult, EventQueue};
use crate::data::PendingTransfer;
use crate::kernel::{Effect, Kernel, KernelConfig};
use crate::model::{CuId, PilotId, Tick};

enum SimEvent {
    Activate(PilotId),
    Walltime(PilotId),
    Epoch,
    Poll(PilotId),
    TransferDone(PendingTransfer),
    RunDone { attempt: u32, result: BackendResult },
}

pub struct SimRuntime {
    kernel: Kernel,
    queue: EventQueue<SimEvent>,
    /// Pending events other than walltime timers and killed completions.
    live: usize,
    epoch_at: Option<Tick>,
    polls: BTreeSet<PilotId>,
    running: BTreeSet<(CuId, u32)>,
    killed: BTreeSet<(CuId, u32)>,
    t_max: Option<Tick>,
    exceeded: bool,
    audit: bool,
    violations: Vec<String>,
    closed: bool,
}

impl SimRuntime {
    pub fn new(config: KernelConfig) -> Self {
        let t_max = config.t_max_s;
        Self {
            kernel: Kernel::new(config),
            queue: EventQueue::new(),
            live: 0,
            epoch_at: None,
            polls: BTreeSet::new(),
            running: BTreeSet::new(),
            killed: BTreeSet::new(),
            t_max,
            exceeded: false,
            audit: false,
            violations: Vec::new(),
            closed: false,
        }
    }

    /// Checks store conservation after every event.
    pub fn with_audit(mut self) -> Self {
        self.audit = true;
        self
    }

    pub fn now(&self) -> Tick {
        self.queue.now()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn exceeded(&self) -> bool {
        self.exceeded
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// Runs `f` against the kernel at the current time and schedules the
    /// resulting effects.
    pub fn with_kernel<R>(&mut self, f: impl FnOnce(&mut Kernel, Tick) -> R) -> R {
        let now = self.now();
        let r = f(&mut self.kernel, now);
        self.apply_effects(now);
        r
    }

    fn push(&mut self, at: Tick, ev: SimEvent, live: bool) {
        self.queue
            .push(at, ev)
            .expect("effects are never scheduled in the past");
        if live {
            self.live += 1;
        }
    }

    fn apply_effects(&mut self, now: Tick) {
        loop {
            let effects = self.kernel.take_effects();
            if effects.is_empty() {
                break;
            }
            for effect in effects {
                match effect {
                    Effect::Launch { pilot, delay_s } => self.push(now + delay_s, SimEvent::Activate(pilot), true),
                    Effect::Deadline { pilot, at } => self.push(at, SimEvent::Walltime(pilot), false),
                    Effect::Poll(pilot) => {
                        if self.polls.insert(pilot.clone()) {
                            self.push(now, SimEvent::Poll(pilot), true);
                        }
                    }
                    Effect::Transfer(pending) => {
                        let at = now + pending.ticks();
                        self.push(at, SimEvent::TransferDone(pending), true);
                    }
                    Effect::Execute(req) => match execute_sim(&req.cu, now) {
                        Ok((at, result)) => {
                            self.running.insert((req.cu.id.clone(), req.attempt));
                            self.push(
                                at,
                                SimEvent::RunDone {
                                    attempt: req.attempt,
                                    result,
                                },
                                true,
                            );
                        }
                        Err(e) => self
                            .kernel
                            .fail_running(&req.cu.id, req.attempt, "spawn", e.to_string(), now),
                    },
                    Effect::Kill { cu, attempt } => {
                        let key = (cu, attempt);
                        if self.running.remove(&key) {
                            self.killed.insert(key);
                            self.live -= 1;
                        }
                    }
                }
            }
        }
        if self.kernel.take_epoch_request() && self.epoch_at != Some(now) {
            self.epoch_at = Some(now);
            self.push(now, SimEvent::Epoch, true);
        }
    }

    /// Whether work is still pending.
    pub fn is_active(&self) -> bool {
        self.live > 0 && !self.exceeded
    }

    /// Processes the next event if its time is at most `limit`. Returns
    /// false when nothing was processed.
    pub fn step(&mut self, limit: Option<Tick>) -> bool {
        loop {
            if !self.is_active() {
                return false;
            }
            let Some(t) = self.queue.peek_time() else { return false };
            if let Some(t_max) = self.t_max {
                if t > t_max {
                    self.stop(t_max);
                    return false;
                }
            }
            if limit.is_some_and(|l| t > l) {
                return false;
            }
            let (now, ev) = self.queue.tick().expect("peeked");
            match ev {
                SimEvent::Activate(p) => {
                    self.live -= 1;
                    self.kernel.activate_pilot(&p, now);
                }
                SimEvent::Walltime(p) => self.kernel.walltime(&p, now),
                SimEvent::Epoch => {
                    self.live -= 1;
                    if self.epoch_at == Some(now) {
                        self.epoch_at = None;
                    }
                    self.kernel.run_epoch(now);
                }
                SimEvent::Poll(p) => {
                    self.live -= 1;
                    self.polls.remove(&p);
                    self.kernel.agent_poll(&p, now);
                }
                SimEvent::TransferDone(pending) => {
                    self.live -= 1;
                    self.kernel.transfer_done(pending, Ok(()), now);
                }
                SimEvent::RunDone { attempt, result } => {
                    let key = (result.cu_id.clone(), attempt);
                    if self.killed.remove(&key) {
                        continue;
                    }
                    self.live -= 1;
                    self.running.remove(&key);
                    self.kernel.finish_cu(&key.0, attempt, result, now);
                }
            }
            self.apply_effects(now);
            if self.audit {
                if let Err(v) = self.kernel.data().check_conservation() {
                    self.violations.push(format!("t={now}: {v}"));
                }
            }
            return true;
        }
    }

    fn stop(&mut self, t_max: Tick) {
        self.queue.advance_to(t_max);
        self.kernel.stop(t_max);
        self.kernel.take_effects();
        self.exceeded = true;
    }

    /// Runs until no work is pending or the budget is spent.
    pub fn run(&mut self) {
        while self.step(None) {}
    }

    /// Runs events up to and including time `limit`, then moves the clock
    /// there.
    pub fn run_until(&mut self, limit: Tick) {
        while self.step(Some(limit)) {}
        if !self.exceeded {
            self.queue.advance_to(limit);
        }
    }

    /// Ends the run: reports stuck units and retires the pilots.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        if !self.exceeded {
            let now = self.now();
            self.kernel.report_unschedulable(now);
            self.kernel.shutdown(now);
            self.kernel.take_effects();
        }
    }
}
