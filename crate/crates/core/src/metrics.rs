//! Run metrics computed from an event log alone, so a saved log replays to
//! the same report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{EventKind, EventLog};
use crate::model::{BackendKind, CuState, EntityKind, Lifecycle, Tick};

/// Timestamps (seconds since run start) of a unit's last attempt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CuTimeline {
    pub t_submit: f64,
    pub t_bind: Option<f64>,
    pub t_stage_start: Option<f64>,
    pub t_stage_end: Option<f64>,
    pub t_run_start: Option<f64>,
    pub t_run_end: Option<f64>,
    pub state: String,
    pub attempts: u32,
    /// The last attempt did not run to completion: a timestamp is missing or
    /// the unit was canceled.
    pub partial: bool,
}

impl CuTimeline {
    /// The present timestamps in lifecycle order.
    pub fn ordered(&self) -> Vec<f64> {
        [
            Some(self.t_submit),
            self.t_bind,
            self.t_stage_start,
            self.t_stage_end,
            self.t_run_start,
            self.t_run_end,
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PilotUtilization {
    pub cores: u32,
    pub active_s: f64,
    pub busy_slot_s: f64,
    /// busy_slot_s / (cores × active_s); 0 for a pilot that never ran.
    pub utilization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub backend: BackendKind,
    pub timelines: BTreeMap<String, CuTimeline>,
    /// Workload time to completion: last DONE run end minus first submit.
    #[serde(rename = "T_C")]
    pub t_c: f64,
    /// Configured run budget in seconds.
    #[serde(rename = "T_max")]
    pub t_max: Option<u64>,
    pub exceeded: bool,
    pub bytes_transferred: u64,
    pub utilization: BTreeMap<String, PilotUtilization>,
    pub unschedulable: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("incomplete log: {}", .0.join("; "))]
    IncompleteLog(Vec<String>),
}

#[derive(Default)]
struct CuTrack {
    cores: u32,
    submit: Tick,
    bind: Option<Tick>,
    stage_start: Option<Tick>,
    run_start: Option<Tick>,
    run_end: Option<Tick>,
    state: Option<CuState>,
    attempts: u32,
    pilot: Option<String>,
    occupied_since: Option<Tick>,
}

#[derive(Default)]
struct PilotTrack {
    cores: u32,
    running_since: Option<Tick>,
    active: Tick,
    busy: u128,
}

/// Computes the report for a finished run.
pub fn emit_metrics(log: &EventLog) -> Result<MetricsReport, MetricsError> {
    let tps = log.header.backend.ticks_per_second();
    let secs = |t: Tick| t as f64 / tps;
    let mut cus: BTreeMap<String, CuTrack> = BTreeMap::new();
    let mut pilots: BTreeMap<String, PilotTrack> = BTreeMap::new();
    let mut unschedulable = BTreeMap::new();
    let mut bytes_transferred = 0u64;
    let mut stopped = false;
    let end = log.events.last().map_or(0, |e| e.t);

    for ev in &log.events {
        match ev.kind {
            EventKind::Transfer => bytes_transferred += ev.data_u64("bytes").unwrap_or(0),
            EventKind::Stop => stopped = true,
            EventKind::Unschedulable => {
                if let Some((EntityKind::Cu, id)) = ev.entity_parts() {
                    unschedulable.insert(id.to_owned(), ev.data_str("reason").unwrap_or("").to_owned());
                }
            }
            EventKind::Create => match ev.entity_parts() {
                Some((EntityKind::Cu, id)) => {
                    cus.insert(
                        id.to_owned(),
                        CuTrack {
                            cores: ev.data_u64("cores").unwrap_or(1) as u32,
                            submit: ev.t,
                            state: Some(CuState::New),
                            ..CuTrack::default()
                        },
                    );
                }
                Some((EntityKind::Pilot, id)) => {
                    pilots.insert(
                        id.to_owned(),
                        PilotTrack {
                            cores: ev.data_u64("cores").unwrap_or(0) as u32,
                            ..PilotTrack::default()
                        },
                    );
                }
                _ => {}
            },
            EventKind::Transition => match ev.entity_parts() {
                Some((EntityKind::Cu, id)) => {
                    let Some(cu) = cus.get_mut(id) else { continue };
                    let to = ev.to.as_deref().and_then(CuState::parse);
                    let from = ev.from.as_deref().and_then(CuState::parse);
                    match to {
                        Some(CuState::Pending) => {
                            cu.bind = Some(ev.t);
                            cu.stage_start = None;
                            cu.run_start = None;
                            cu.run_end = None;
                            cu.pilot = ev.data_str("pilot").map(str::to_owned);
                        }
                        Some(CuState::Staging) => {
                            cu.stage_start = Some(ev.t);
                            cu.attempts += 1;
                            cu.occupied_since = Some(ev.t);
                        }
                        Some(CuState::Running) => cu.run_start = Some(ev.t),
                        _ => {}
                    }
                    if from == Some(CuState::Running) {
                        cu.run_end = Some(ev.t);
                    }
                    let leaves_slots =
                        from.is_some_and(CuState::occupies_slots) && !to.is_some_and(CuState::occupies_slots);
                    if leaves_slots {
                        if let (Some(since), Some(p)) = (cu.occupied_since.take(), &cu.pilot) {
                            if let Some(pt) = pilots.get_mut(p) {
                                pt.busy += u128::from(cu.cores) * u128::from(ev.t - since);
                            }
                        }
                    }
                    cu.state = to;
                }
                Some((EntityKind::Pilot, id)) => {
                    let Some(p) = pilots.get_mut(id) else { continue };
                    if ev.to.as_deref() == Some("RUNNING") {
                        p.running_since = Some(ev.t);
                    } else if let Some(since) = p.running_since.take() {
                        p.active += ev.t - since;
                    }
                }
                _ => {}
            },
            _ => {}
        }
    }

    let mut missing = Vec::new();
    for (id, cu) in &mut cus {
        let terminal = cu.state.is_some_and(Lifecycle::is_terminal);
        if !terminal && !unschedulable.contains_key(id) && !stopped {
            missing.push(format!("cu {id} has no terminal event"));
        }
        if let (Some(since), Some(p)) = (cu.occupied_since.take(), &cu.pilot) {
            if let Some(pt) = pilots.get_mut(p) {
                pt.busy += u128::from(cu.cores) * u128::from(end - since);
            }
        }
    }
    if !missing.is_empty() {
        return Err(MetricsError::IncompleteLog(missing));
    }
    for p in pilots.values_mut() {
        if let Some(since) = p.running_since.take() {
            p.active += end - since;
        }
    }

    let timelines: BTreeMap<String, CuTimeline> = cus
        .iter()
        .map(|(id, cu)| {
            let tl = CuTimeline {
                t_submit: secs(cu.submit),
                t_bind: cu.bind.map(secs),
                t_stage_start: cu.stage_start.map(secs),
                t_stage_end: cu.run_start.map(secs),
                t_run_start: cu.run_start.map(secs),
                t_run_end: cu.run_end.map(secs),
                state: cu.state.map_or("?", Lifecycle::name).to_owned(),
                attempts: cu.attempts,
                partial: !matches!(cu.state, Some(CuState::Done | CuState::Failed))
                    || cu.bind.is_none()
                    || cu.stage_start.is_none()
                    || cu.run_start.is_none()
                    || cu.run_end.is_none(),
            };
            (id.clone(), tl)
        })
        .collect();

    let first_submit = cus.values().map(|c| c.submit).min();
    let last_done = cus
        .values()
        .filter(|c| c.state == Some(CuState::Done))
        .filter_map(|c| c.run_end)
        .max();
    let t_c = match (first_submit, last_done) {
        (Some(a), Some(b)) => secs(b.saturating_sub(a)),
        _ => 0.0,
    };

    let utilization = pilots
        .into_iter()
        .map(|(id, p)| {
            let capacity = u128::from(p.cores) * u128::from(p.active);
            let u = PilotUtilization {
                cores: p.cores,
                active_s: secs(p.active),
                busy_slot_s: p.busy as f64 / tps,
                utilization: if capacity == 0 {
                    0.0
                } else {
                    p.busy as f64 / capacity as f64
                },
            };
            (id, u)
        })
        .collect();

    Ok(MetricsReport {
        backend: log.header.backend,
        timelines,
        t_c,
        t_max: log.header.t_max_s,
        exceeded: stopped,
        bytes_transferred,
        utilization,
        unschedulable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelConfig;
    use crate::model::{ComputeUnitDescription, PilotDescription};
    use crate::sim::SimRuntime;

    fn pilot(id: &str, cores: u32) -> PilotDescription {
        PilotDescription {
            id: id.into(),
            resource: "sim://a".into(),
            cores,
            walltime_s: 1000,
            affinity: "a".into(),
            store_capacity_bytes: 0,
            queue_delay_s: 0,
        }
    }

    fn run(pilots: &[(&str, u32)], durations: &[f64], t_max: Option<u64>) -> EventLog {
        let mut config = KernelConfig::new(BackendKind::Sim);
        config.t_max_s = t_max;
        let mut rt = SimRuntime::new(config);
        for (id, cores) in pilots {
            rt.with_kernel(|k, now| k.create_pilot(pilot(id, *cores), now)).unwrap();
        }
        for (i, d) in durations.iter().enumerate() {
            let mut c = ComputeUnitDescription::new(format!("c{i}"), "true");
            c.sim_duration_s = Some(*d);
            rt.with_kernel(|k, now| k.submit_cu(c, now)).unwrap();
        }
        rt.run();
        rt.close();
        rt.kernel().snapshot()
    }

    #[test]
    fn single_unit_completion_time() {
        let m = emit_metrics(&run(&[("p1", 1)], &[7.0], None)).unwrap();
        assert_eq!(m.t_c, 7.0);
        assert!(!m.exceeded);
        let tl = &m.timelines["c0"];
        assert_eq!(tl.t_run_end, Some(7.0));
        assert!(!tl.partial);
    }

    #[test]
    fn two_single_core_pilots_fully_busy() {
        // hand timeline: each pilot runs two 5 s units back to back, 0..10
        let m = emit_metrics(&run(&[("p1", 1), ("p2", 1)], &[5.0; 4], None)).unwrap();
        assert_eq!(m.t_c, 10.0);
        for p in ["p1", "p2"] {
            assert_eq!(m.utilization[p].utilization, 1.0, "{p}");
            assert_eq!(m.utilization[p].active_s, 10.0);
        }
    }

    #[test]
    fn budget_stop_flags_partial_timelines() {
        let m = emit_metrics(&run(&[("p1", 1)], &[5.0, 5.0], Some(8))).unwrap();
        assert!(m.exceeded);
        assert_eq!(m.t_max, Some(8));
        assert!(!m.timelines["c0"].partial);
        assert!(m.timelines["c1"].partial);
        assert_eq!(m.t_c, 5.0);
    }

    #[test]
    fn missing_terminal_event_is_reported() {
        let mut log = run(&[("p1", 1)], &[3.0], None);
        log.events.retain(|e| e.to.as_deref() != Some("DONE"));
        assert!(matches!(emit_metrics(&log), Err(MetricsError::IncompleteLog(_))));
    }

    #[test]
    fn timelines_are_ordered() {
        let m = emit_metrics(&run(&[("p1", 2)], &[1.5, 2.0, 3.0, 0.5], None)).unwrap();
        for tl in m.timelines.values() {
            let ts = tl.ordered();
            assert!(ts.windows(2).all(|w| w[0] <= w[1]), "{ts:?}");
        }
    }
}
