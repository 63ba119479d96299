//! Exhaustive makespan oracle for small simulated workloads.
//!
//! Enumerates every assignment of compute units to pilots together with every
//! per-pilot execution order and returns the smallest completion time. Each
//! pilot runs its units in order, a unit starting once its predecessor has
//! started and enough slots are free; a unit occupies its slots for staging
//! plus run time. Staging pulls every input that is not initially on the
//! pilot concurrently from its initial holder (or the external source), so it
//! lasts as long as the slowest pull. Walltime is not modelled.

use thiserror::Error;

use crate::manifest::{bandwidth_between, transfer_ticks, WorkloadManifest};
use crate::model::{Tick, EXTERNAL_STORE};

pub const ORACLE_MAX_PILOTS: usize = 3;
pub const ORACLE_MAX_CUS: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("instance too large: {pilots} pilots, {cus} compute units (limit {ORACLE_MAX_PILOTS}/{ORACLE_MAX_CUS})")]
    InstanceTooLarge { pilots: usize, cus: usize },
    #[error("compute unit `{0}` has no duration")]
    MissingDuration(String),
    #[error("data unit `{0}` is produced by a compute unit; the oracle handles pre-placed inputs only")]
    ProducedInput(String),
    #[error("compute unit `{0}` fits on no pilot")]
    Infeasible(String),
}

struct Pilot {
    cores: u32,
    ready: Tick,
}

struct Unit {
    cores: u32,
    /// Slot occupancy per pilot; None when the unit does not fit.
    cost: Vec<Option<Tick>>,
}

/// Minimum workload completion time over all assignments and orders.
pub fn optimal_makespan_oracle(m: &WorkloadManifest) -> Result<Tick, OracleError> {
    if m.pilots.len() > ORACLE_MAX_PILOTS || m.compute_units.len() > ORACLE_MAX_CUS {
        return Err(OracleError::InstanceTooLarge {
            pilots: m.pilots.len(),
            cus: m.compute_units.len(),
        });
    }
    let pilots: Vec<Pilot> = m
        .pilots
        .iter()
        .map(|p| Pilot {
            cores: p.cores,
            ready: p.queue_delay_s,
        })
        .collect();

    let mut units = Vec::with_capacity(m.compute_units.len());
    for cu in &m.compute_units {
        let run = cu
            .sim_ticks()
            .ok_or_else(|| OracleError::MissingDuration(cu.id.to_string()))?;
        let mut cost = Vec::with_capacity(pilots.len());
        for p in &m.pilots {
            if cu.cores > p.cores {
                cost.push(None);
                continue;
            }
            let mut staging = 0;
            for d in &cu.input_data {
                let Some(du) = m.data_units.iter().find(|x| x.id == *d) else {
                    continue;
                };
                let holder = du
                    .initial_store
                    .as_deref()
                    .ok_or_else(|| OracleError::ProducedInput(d.to_string()))?;
                if holder == p.id.as_str() {
                    continue;
                }
                let from_site = if holder == EXTERNAL_STORE {
                    EXTERNAL_STORE
                } else {
                    m.pilots
                        .iter()
                        .find(|q| q.id.as_str() == holder)
                        .map_or(EXTERNAL_STORE, |q| q.site())
                };
                let rate = bandwidth_between(m.bandwidth.as_ref(), from_site, p.site());
                staging = staging.max(transfer_ticks(du.size_bytes.unwrap_or(0), rate));
            }
            cost.push(Some(staging + run));
        }
        if cost.iter().all(Option::is_none) {
            return Err(OracleError::Infeasible(cu.id.to_string()));
        }
        units.push(Unit { cores: cu.cores, cost });
    }
    if units.is_empty() {
        return Ok(0);
    }

    let mut state: Vec<PilotState> = pilots
        .iter()
        .map(|p| PilotState {
            slots: vec![p.ready; p.cores as usize],
            last_start: p.ready,
        })
        .collect();
    let mut best = Tick::MAX;
    let mut used = vec![false; units.len()];
    search(&units, &mut state, &mut used, 0, 0, &mut best);
    Ok(best)
}

#[derive(Clone)]
struct PilotState {
    /// Time each slot becomes free, kept sorted ascending.
    slots: Vec<Tick>,
    last_start: Tick,
}

fn search(units: &[Unit], state: &mut [PilotState], used: &mut [bool], placed: usize, makespan: Tick, best: &mut Tick) {
    if makespan >= *best {
        return;
    }
    if placed == units.len() {
        *best = makespan;
        return;
    }
    for u in 0..units.len() {
        if used[u] {
            continue;
        }
        for p in 0..state.len() {
            let Some(cost) = units[u].cost[p] else { continue };
            let need = units[u].cores as usize;
            let saved = state[p].clone();
            let ps = &mut state[p];
            let start = ps.slots[need - 1].max(ps.last_start);
            let end = start + cost;
            for s in &mut ps.slots[..need] {
                *s = end;
            }
            ps.slots.sort_unstable();
            ps.last_start = start;
            used[u] = true;
            search(units, state, used, placed + 1, makespan.max(end), best);
            used[u] = false;
            state[p] = saved;
        }
    }
}
