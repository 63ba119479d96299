//! Offline checks over an event log: legal transitions, per-entity time
//! order, retry budgets, slot and store capacity, and run completeness.

use std::collections::{BTreeMap, BTreeSet};

use crate::ledger::{Event, EventKind, EventLog};
use crate::model::{CuState, DuState, EntityKind, Lifecycle, PilotState, Tick};

#[derive(Default)]
struct Entity {
    state: String,
    t: Tick,
}

#[derive(Default)]
struct PilotBook {
    cores: u64,
    capacity: u64,
    occupied: u64,
    stored: u64,
}

#[derive(Default)]
struct CuBook {
    cores: u64,
    max_retries: u64,
    retries: u64,
    pilot: Option<String>,
}

fn legal<S: Lifecycle>(from: &str, to: &str) -> Result<(S, S), String> {
    let f = S::parse(from).ok_or_else(|| format!("unknown state {from}"))?;
    let t = S::parse(to).ok_or_else(|| format!("unknown state {to}"))?;
    if f.can_become(t) {
        Ok((f, t))
    } else {
        Err(format!("illegal {from} -> {to}"))
    }
}

/// Returns every violation found; empty means the log is sound.
pub fn audit_log(log: &EventLog) -> Vec<String> {
    let mut out = Vec::new();
    let mut entities: BTreeMap<String, Entity> = BTreeMap::new();
    let mut pilots: BTreeMap<String, PilotBook> = BTreeMap::new();
    let mut cus: BTreeMap<String, CuBook> = BTreeMap::new();
    let mut replicas: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut unschedulable = BTreeSet::new();
    let mut stopped = false;
    let mut last_t = 0;

    for (i, ev) in log.events.iter().enumerate() {
        let at = |msg: String| format!("seq {} ({}): {msg}", ev.seq, ev.entity);
        if ev.seq != i as u64 {
            out.push(at(format!("expected seq {i}")));
        }
        // local runs stamp wall time under one lock, so the log is globally ordered too
        if ev.t < last_t {
            out.push(at(format!("time went back from {last_t} to {}", ev.t)));
        }
        last_t = last_t.max(ev.t);
        match ev.kind {
            EventKind::Create => create(ev, &mut entities, &mut pilots, &mut cus, &mut out),
            EventKind::Transition => {
                if let Err(msg) = transition(ev, &mut entities, &mut pilots, &mut cus, &replicas) {
                    out.push(at(msg));
                }
            }
            EventKind::Replica => {
                let (Some(pilot), Some(bytes)) = (ev.data_str("pilot"), ev.data_u64("bytes")) else {
                    out.push(at("replica without pilot/bytes".into()));
                    continue;
                };
                let id = ev.entity_parts().map_or("", |(_, id)| id).to_owned();
                if !replicas.entry(id).or_default().insert(pilot.to_owned()) {
                    out.push(at(format!("replica on {pilot} added twice")));
                }
                if let Some(book) = pilots.get_mut(pilot) {
                    book.stored += bytes;
                    if book.stored > book.capacity {
                        out.push(at(format!(
                            "store {pilot} holds {} > capacity {}",
                            book.stored, book.capacity
                        )));
                    }
                }
            }
            EventKind::Unschedulable => {
                unschedulable.insert(ev.entity.clone());
            }
            EventKind::Stop => stopped = true,
            _ => {}
        }
    }

    if !stopped {
        for (key, e) in &entities {
            if key.starts_with("cu/")
                && !CuState::parse(&e.state).is_some_and(CuState::is_terminal)
                && !unschedulable.contains(key)
            {
                out.push(format!(
                    "{key}: ends in {} without terminal state or unschedulable report",
                    e.state
                ));
            }
        }
    }
    out
}

fn create(
    ev: &Event,
    entities: &mut BTreeMap<String, Entity>,
    pilots: &mut BTreeMap<String, PilotBook>,
    cus: &mut BTreeMap<String, CuBook>,
    out: &mut Vec<String>,
) {
    let Some((kind, id)) = ev.entity_parts() else {
        out.push(format!("seq {}: bad entity {}", ev.seq, ev.entity));
        return;
    };
    let initial = match kind {
        EntityKind::Pilot => PilotState::INITIAL.name(),
        EntityKind::Cu => CuState::INITIAL.name(),
        EntityKind::Du => DuState::INITIAL.name(),
    };
    if ev.to.as_deref() != Some(initial) {
        out.push(format!("seq {}: {} created in {:?}", ev.seq, ev.entity, ev.to));
    }
    let fresh = entities
        .insert(
            ev.entity.clone(),
            Entity {
                state: initial.to_owned(),
                t: ev.t,
            },
        )
        .is_none();
    if !fresh {
        out.push(format!("seq {}: {} created twice", ev.seq, ev.entity));
    }
    match kind {
        EntityKind::Pilot => {
            pilots.insert(
                id.to_owned(),
                PilotBook {
                    cores: ev.data_u64("cores").unwrap_or(0),
                    capacity: ev.data_u64("store_capacity_bytes").unwrap_or(0),
                    ..PilotBook::default()
                },
            );
        }
        EntityKind::Cu => {
            cus.insert(
                id.to_owned(),
                CuBook {
                    cores: ev.data_u64("cores").unwrap_or(1),
                    max_retries: ev.data_u64("max_retries").unwrap_or(0),
                    ..CuBook::default()
                },
            );
        }
        EntityKind::Du => {}
    }
}

fn transition(
    ev: &Event,
    entities: &mut BTreeMap<String, Entity>,
    pilots: &mut BTreeMap<String, PilotBook>,
    cus: &mut BTreeMap<String, CuBook>,
    replicas: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(), String> {
    let (Some(from), Some(to)) = (ev.from.as_deref(), ev.to.as_deref()) else {
        return Err("transition without from/to".into());
    };
    let (kind, id) = ev.entity_parts().ok_or("bad entity")?;
    let entity = entities.get_mut(&ev.entity).ok_or("transition before create")?;
    if entity.state != from {
        return Err(format!("from {from} but entity is {}", entity.state));
    }
    if ev.t < entity.t {
        return Err(format!("entity time went back from {} to {}", entity.t, ev.t));
    }
    match kind {
        EntityKind::Pilot => {
            legal::<PilotState>(from, to)?;
        }
        EntityKind::Du => {
            let (_, t) = legal::<DuState>(from, to)?;
            if t == DuState::Ready && replicas.get(id).is_none_or(BTreeSet::is_empty) {
                return Err("READY without a replica".into());
            }
        }
        EntityKind::Cu => {
            let (f, t) = legal::<CuState>(from, to)?;
            let book = cus.get_mut(id).ok_or("unknown cu")?;
            if f == CuState::Failed && t == CuState::Unscheduled {
                book.retries += 1;
                if book.retries > book.max_retries {
                    return Err(format!(
                        "retry {} exceeds max_retries {}",
                        book.retries, book.max_retries
                    ));
                }
            }
            if t == CuState::Pending {
                book.pilot = ev.data_str("pilot").map(str::to_owned);
            }
            if !f.occupies_slots() && t.occupies_slots() {
                let pilot = book.pilot.clone().ok_or("staging without a bound pilot")?;
                let p = pilots.get_mut(&pilot).ok_or("bound to unknown pilot")?;
                let pilot_state = entities.get(&format!("pilot/{pilot}")).map(|e| e.state.as_str());
                if pilot_state != Some(PilotState::Running.name()) {
                    return Err(format!("occupies slots on pilot {pilot} in {pilot_state:?}"));
                }
                p.occupied += book.cores;
                if p.occupied > p.cores {
                    return Err(format!("pilot {pilot} slots {} > cores {}", p.occupied, p.cores));
                }
            } else if f.occupies_slots() && !t.occupies_slots() {
                let pilot = book.pilot.clone().ok_or("unbound occupant")?;
                if let Some(p) = pilots.get_mut(&pilot) {
                    p.occupied -= book.cores;
                }
            }
        }
    }
    let entity = entities.get_mut(&ev.entity).expect("checked above");
    entity.state = to.to_owned();
    entity.t = ev.t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelConfig;
    use crate::model::{BackendKind, ComputeUnitDescription, PilotDescription};
    use crate::sim::SimRuntime;

    fn small_log() -> EventLog {
        let mut rt = SimRuntime::new(KernelConfig::new(BackendKind::Sim));
        rt.with_kernel(|k, now| {
            k.create_pilot(
                PilotDescription {
                    id: "p1".into(),
                    resource: "sim://a".into(),
                    cores: 1,
                    walltime_s: 100,
                    affinity: "a".into(),
                    store_capacity_bytes: 0,
                    queue_delay_s: 0,
                },
                now,
            )
        })
        .unwrap();
        for id in ["c1", "c2"] {
            let mut c = ComputeUnitDescription::new(id, "true");
            c.sim_duration_s = Some(2.0);
            rt.with_kernel(|k, now| k.submit_cu(c, now)).unwrap();
        }
        rt.run();
        rt.close();
        rt.kernel().snapshot()
    }

    #[test]
    fn clean_run_passes() {
        assert_eq!(audit_log(&small_log()), Vec::<String>::new());
    }

    #[test]
    fn tampered_edge_is_caught() {
        let mut log = small_log();
        let ev = log
            .events
            .iter_mut()
            .find(|e| e.to.as_deref() == Some("STAGING"))
            .unwrap();
        ev.to = Some("DONE".into());
        assert!(audit_log(&log).iter().any(|v| v.contains("illegal")));
    }

    #[test]
    fn slot_overcommit_is_caught() {
        let mut log = small_log();
        for ev in &mut log.events {
            if ev.entity == "pilot/p1" && ev.kind == EventKind::Create {
                ev.data["cores"] = 0.into();
            }
        }
        assert!(audit_log(&log).iter().any(|v| v.contains("slots")));
    }

    #[test]
    fn missing_terminal_is_caught() {
        let mut log = small_log();
        log.events.retain(|e| e.to.as_deref() != Some("DONE"));
        for (i, e) in log.events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        assert!(!audit_log(&log).is_empty());
    }
}
