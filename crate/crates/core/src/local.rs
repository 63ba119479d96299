//! Multi-threaded driver for the local backend.
//!
//! The kernel sits behind one mutex. Each pilot gets an agent thread that
//! waits out the queue delay, then polls its command queue whenever woken or
//! every [`LOCAL_POLL_INTERVAL`]. Transfers and executions run on their own
//! threads and report back under the lock, so every log entry is stamped with
//! a wall-clock time taken while holding it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};

use crate::agent::{execute_local, ProcessGauge, LOCAL_POLL_INTERVAL};
use crate::data::{copy_files, PendingTransfer};
use crate::kernel::{Effect, ExecRequest, Kernel, KernelConfig, WaitReport};
use crate::ledger::EventLog;
use crate::model::{CuId, Lifecycle, PilotId, Tick};

struct LocalState {
    kernel: Kernel,
    deadlines: BTreeMap<PilotId, Tick>,
    wake: BTreeSet<PilotId>,
    cancels: BTreeMap<(CuId, u32), Arc<AtomicBool>>,
    t_max: Option<Tick>,
    exceeded: bool,
    shutting_down: bool,
    closed: bool,
}

struct Shared {
    state: Mutex<LocalState>,
    changed: Condvar,
    gauge: ProcessGauge,
    start: Instant,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn now(&self) -> Tick {
        self.start.elapsed().as_millis() as Tick
    }

    fn spawn(self: &Arc<Self>, f: impl FnOnce(Arc<Shared>) + Send + 'static) {
        let me = Arc::clone(self);
        let handle = std::thread::spawn(move || f(me));
        self.threads.lock().push(handle);
    }

    /// Drains kernel effects (running any requested epoch in place) and wakes
    /// every waiter.
    fn process(self: &Arc<Self>, st: &mut LocalState, now: Tick) {
        loop {
            let effects = st.kernel.take_effects();
            let epoch = st.kernel.take_epoch_request();
            if effects.is_empty() && !epoch {
                break;
            }
            for effect in effects {
                match effect {
                    Effect::Launch { pilot, delay_s } => {
                        self.spawn(move |sh| agent_loop(&sh, pilot, Duration::from_secs(delay_s)))
                    }
                    Effect::Deadline { pilot, at } => {
                        st.deadlines.insert(pilot, at);
                    }
                    Effect::Poll(pilot) => {
                        st.wake.insert(pilot);
                    }
                    Effect::Transfer(pending) => self.spawn(move |sh| transfer(&sh, pending)),
                    Effect::Execute(req) => {
                        let flag = Arc::new(AtomicBool::new(false));
                        st.cancels.insert((req.cu.id.clone(), req.attempt), Arc::clone(&flag));
                        self.spawn(move |sh| execute(&sh, req, &flag));
                    }
                    Effect::Kill { cu, attempt } => {
                        if let Some(flag) = st.cancels.get(&(cu, attempt)) {
                            flag.store(true, Ordering::SeqCst);
                        }
                    }
                }
            }
            if epoch && !st.kernel.is_stopped() {
                st.kernel.run_epoch(now);
            }
        }
        self.changed.notify_all();
    }

    /// Stops the run once the budget is spent. Returns true if it was.
    fn check_budget(self: &Arc<Self>, st: &mut LocalState, now: Tick) -> bool {
        if st.exceeded {
            return true;
        }
        let Some(t_max) = st.t_max else { return false };
        if now < t_max || st.kernel.is_stopped() {
            return false;
        }
        st.kernel.stop(now);
        st.exceeded = true;
        self.process(st, now);
        true
    }

    /// Runs `f` under the lock unless the run is closing or stopped.
    fn report_back(self: &Arc<Self>, f: impl FnOnce(&mut Kernel, Tick)) {
        let mut st = self.state.lock();
        if st.shutting_down || st.kernel.is_stopped() {
            return;
        }
        let now = self.now();
        if self.check_budget(&mut st, now) {
            return;
        }
        f(&mut st.kernel, now);
        self.process(&mut st, now);
    }
}

fn wait_until(shared: &Shared, st: &mut MutexGuard<'_, LocalState>, until: Instant) -> bool {
    while !st.shutting_down {
        if Instant::now() >= until {
            return true;
        }
        shared.changed.wait_until(st, until);
    }
    false
}

fn agent_loop(shared: &Arc<Shared>, pilot: PilotId, delay: Duration) {
    let mut st = shared.state.lock();
    if !wait_until(shared, &mut st, Instant::now() + delay) || st.kernel.is_stopped() {
        return;
    }
    let now = shared.now();
    st.kernel.activate_pilot(&pilot, now);
    shared.process(&mut st, now);

    let mut last_poll = Instant::now();
    loop {
        if st.shutting_down || st.kernel.pilot_state(&pilot).is_none_or(Lifecycle::is_terminal) {
            return;
        }
        let now = shared.now();
        if shared.check_budget(&mut st, now) {
            return;
        }
        let deadline = st.deadlines.get(&pilot).copied();
        if deadline.is_some_and(|d| now >= d) {
            st.kernel.walltime(&pilot, now);
            shared.process(&mut st, now);
            continue;
        }
        if st.wake.remove(&pilot) || last_poll.elapsed() >= LOCAL_POLL_INTERVAL {
            last_poll = Instant::now();
            st.kernel.agent_poll(&pilot, now);
            shared.process(&mut st, now);
            continue;
        }
        let mut timeout = LOCAL_POLL_INTERVAL;
        if let Some(d) = deadline {
            timeout = timeout.min(Duration::from_millis(d - now));
        }
        if let Some(t_max) = st.t_max {
            timeout = timeout.min(Duration::from_millis(t_max.saturating_sub(now)));
        }
        shared.changed.wait_for(&mut st, timeout);
    }
}

fn transfer(shared: &Arc<Shared>, pending: PendingTransfer) {
    let outcome = match (&pending.src_dir, &pending.dst_dir) {
        (Some(src), Some(dst)) => copy_files(src, dst, &pending.files)
            .map(|_| ())
            .map_err(|e| e.to_string()),
        _ => Ok(()),
    };
    shared.report_back(|k, now| k.transfer_done(pending, outcome, now));
}

fn execute(shared: &Arc<Shared>, req: ExecRequest, cancel: &AtomicBool) {
    let run = || -> Result<_, String> {
        let dir = req.workdir.clone().ok_or("no working directory")?;
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        for input in &req.inputs {
            copy_files(&input.store_dir, &dir.join(input.du_id.as_str()), &input.files)
                .map_err(|e| format!("staging {}: {e}", input.du_id))?;
        }
        execute_local(&req.cu, &dir, cancel, &shared.gauge).map_err(|e| e.to_string())
    };
    let result = run();
    shared.state.lock().cancels.remove(&(req.cu.id.clone(), req.attempt));
    shared.report_back(|k, now| match result {
        Ok(r) => k.finish_cu(&req.cu.id, req.attempt, r, now),
        Err(msg) => k.fail_running(&req.cu.id, req.attempt, "spawn", msg, now),
    });
}

/// Why [`LocalRuntime::wait`] returned without settling.
#[derive(Debug)]
pub struct Timeout(pub WaitReport);

pub struct LocalRuntime {
    shared: Arc<Shared>,
}

impl LocalRuntime {
    /// Starts a runtime. Without a configured work root a fresh directory
    /// under the system temp dir is used.
    pub fn new(mut config: KernelConfig) -> std::io::Result<Self> {
        let root = match config.workroot.take() {
            Some(root) => root,
            None => unique_temp_dir(),
        };
        fs::create_dir_all(&root)?;
        config.workroot = Some(root);
        let t_max = config.t_max_s.map(|s| s * 1000);
        Ok(Self {
            shared: Arc::new(Shared {
                state: Mutex::new(LocalState {
                    kernel: Kernel::new(config),
                    deadlines: BTreeMap::new(),
                    wake: BTreeSet::new(),
                    cancels: BTreeMap::new(),
                    t_max,
                    exceeded: false,
                    shutting_down: false,
                    closed: false,
                }),
                changed: Condvar::new(),
                gauge: ProcessGauge::default(),
                start: Instant::now(),
                threads: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn workroot(&self) -> PathBuf {
        let st = self.shared.state.lock();
        st.kernel.config().workroot.clone().expect("set in new")
    }

    /// Runs `f` against the kernel at the current time and starts whatever
    /// work results.
    pub fn with_kernel<R>(&self, f: impl FnOnce(&mut Kernel, Tick) -> R) -> R {
        let mut st = self.shared.state.lock();
        let now = self.shared.now();
        let r = f(&mut st.kernel, now);
        self.shared.process(&mut st, now);
        r
    }

    /// Blocks until every unit is terminal or blocked for good, the budget
    /// runs out, or `timeout` passes.
    pub fn wait(&self, timeout: Option<Duration>) -> Result<WaitReport, Timeout> {
        let until = timeout.map(|d| Instant::now() + d);
        let mut st = self.shared.state.lock();
        loop {
            let now = self.shared.now();
            if self.shared.check_budget(&mut st, now) || st.kernel.is_settled() {
                return Ok(st.kernel.report());
            }
            if until.is_some_and(|u| Instant::now() >= u) {
                return Err(Timeout(st.kernel.report()));
            }
            let mut step = LOCAL_POLL_INTERVAL;
            if let Some(t_max) = st.t_max {
                step = step.min(Duration::from_millis(t_max.saturating_sub(now)));
            }
            if let Some(u) = until {
                step = step.min(u.saturating_duration_since(Instant::now()));
            }
            self.shared.changed.wait_for(&mut st, step);
        }
    }

    pub fn exceeded(&self) -> bool {
        self.shared.state.lock().exceeded
    }

    pub fn snapshot(&self) -> EventLog {
        self.shared.state.lock().kernel.snapshot()
    }

    pub fn report(&self) -> WaitReport {
        self.shared.state.lock().kernel.report()
    }

    /// Most child processes alive at once so far.
    pub fn peak_processes(&self) -> usize {
        self.shared.gauge.peak()
    }

    /// Ends the run: reports stuck units, cancels leftovers, retires pilots
    /// and joins every thread.
    pub fn close(&self) {
        {
            let mut st = self.shared.state.lock();
            if st.closed {
                return;
            }
            st.closed = true;
            let now = self.shared.now();
            if !st.kernel.is_stopped() {
                st.kernel.report_unschedulable(now);
                st.kernel.shutdown(now);
            }
            self.shared.process(&mut st, now);
            st.shutting_down = true;
            self.shared.changed.notify_all();
        }
        loop {
            let handles = std::mem::take(&mut *self.shared.threads.lock());
            if handles.is_empty() {
                break;
            }
            for h in handles {
                if h.join().is_err() {
                    log::error!("a runtime thread panicked");
                }
            }
        }
    }
}

impl Drop for LocalRuntime {
    fn drop(&mut self) {
        self.close();
    }
}

fn unique_temp_dir() -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("pilot-run-{}-{nanos}", std::process::id()))
}
