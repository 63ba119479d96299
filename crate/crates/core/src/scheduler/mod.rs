//! Late-binding, data-aware placement of schedulable units onto pilots.
//!
//! Compute units are wrapped into schedulable units on submission and stay
//! unbound until a scheduling epoch finds a running pilot with enough free
//! cores. Candidates are ranked by bytes of input already resident, then by
//! affinity to the non-resident inputs, then by queued load, then by id.

mod oracle;

pub use oracle::{optimal_makespan_oracle, OracleError, ORACLE_MAX_CUS, ORACLE_MAX_PILOTS};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{affinity_distance, ComputeUnitDescription, CuId, DuId, PilotId, SchedulableUnit, Tick};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuPlacement {
    pub size_bytes: u64,
    pub affinity: String,
    pub replicas: BTreeSet<PilotId>,
}

/// Replica map consulted by scoring.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Placement {
    pub dus: BTreeMap<DuId, DuPlacement>,
}

/// What the scheduler knows about one running pilot at an epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PilotView {
    pub id: PilotId,
    pub affinity: String,
    pub free_cores: u32,
    /// Compute units bound to the pilot and not yet finished.
    pub queued_load: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementScore {
    pub pilot_id: PilotId,
    pub local_bytes: u64,
    pub affinity_sum: u64,
    pub queued_load: u32,
}

impl PlacementScore {
    /// Sort key: smaller is better.
    fn rank(&self) -> (std::cmp::Reverse<u64>, std::cmp::Reverse<u64>, u32, &PilotId) {
        use std::cmp::Reverse;
        (
            Reverse(self.local_bytes),
            Reverse(self.affinity_sum),
            self.queued_load,
            &self.pilot_id,
        )
    }
}

/// Scores placing `su` on `pilot`. Pure function of its inputs.
pub fn score(su: &SchedulableUnit, pilot: &PilotView, placement: &Placement) -> PlacementScore {
    let mut local_bytes = 0;
    let mut affinity_sum = 0;
    for du in &su.du_ids {
        let Some(p) = placement.dus.get(du) else { continue };
        if p.replicas.contains(&pilot.id) {
            local_bytes += p.size_bytes;
        } else {
            affinity_sum += u64::from(affinity_distance(&pilot.affinity, &p.affinity));
        }
    }
    PlacementScore {
        pilot_id: pilot.id.clone(),
        local_bytes,
        affinity_sum,
        queued_load: pilot.queued_load,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Locality-ranked greedy placement.
    #[default]
    Affinity,
    /// Cycle through pilots ignoring data placement. Baseline for comparisons.
    RoundRobin,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Affinity => "affinity",
            Policy::RoundRobin => "round-robin",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affinity" => Ok(Policy::Affinity),
            "round-robin" => Ok(Policy::RoundRobin),
            other => Err(format!("unknown policy `{other}` (expected affinity or round-robin)")),
        }
    }
}

/// An unbound unit and the cores its compute unit needs.
#[derive(Clone, Copy, Debug)]
pub struct BindRequest<'a> {
    pub su: &'a SchedulableUnit,
    pub cores: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Binding {
    pub cu_id: CuId,
    pub pilot_id: PilotId,
    pub score: Option<PlacementScore>,
}

/// One greedy pass over `requests` in submission order. Units with no pilot
/// offering enough free cores stay unbound. `rr_cursor` persists the
/// round-robin position across epochs.
pub fn bind(
    requests: &[BindRequest<'_>],
    pilots: &[PilotView],
    placement: &Placement,
    policy: Policy,
    rr_cursor: &mut usize,
) -> Vec<Binding> {
    let mut pilots: Vec<PilotView> = pilots.to_vec();
    pilots.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for req in requests {
        let chosen = match policy {
            Policy::Affinity => pilots
                .iter()
                .enumerate()
                .filter(|(_, p)| p.free_cores >= req.cores)
                .map(|(i, p)| (i, score(req.su, p, placement)))
                .min_by(|(_, a), (_, b)| a.rank().cmp(&b.rank()))
                .map(|(i, s)| (i, Some(s))),
            Policy::RoundRobin => {
                let n = pilots.len();
                (0..n)
                    .map(|k| (*rr_cursor + k) % n)
                    .find(|&i| pilots[i].free_cores >= req.cores)
                    .map(|i| {
                        *rr_cursor = (i + 1) % n;
                        (i, None)
                    })
            }
        };
        if let Some((i, score)) = chosen {
            let p = &mut pilots[i];
            p.free_cores -= req.cores;
            p.queued_load += 1;
            out.push(Binding {
                cu_id: req.su.cu_id.clone(),
                pilot_id: p.id.clone(),
                score,
            });
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("schedulable unit for `{0}` already exists")]
    DuplicateSu(CuId),
    #[error("no schedulable unit for `{0}`")]
    UnknownSu(CuId),
}

/// Owns the schedulable units and the epoch counter.
#[derive(Debug, Default)]
pub struct Scheduler {
    sus: BTreeMap<CuId, SchedulableUnit>,
    cores: BTreeMap<CuId, u32>,
    order: Vec<CuId>,
    epoch: u64,
    policy: Policy,
    rr_cursor: usize,
}

impl Scheduler {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Creates the unit for a newly submitted compute unit.
    pub fn form_su(&mut self, cu: &ComputeUnitDescription) -> Result<&SchedulableUnit, SchedulerError> {
        if self.sus.contains_key(&cu.id) {
            return Err(SchedulerError::DuplicateSu(cu.id.clone()));
        }
        self.order.push(cu.id.clone());
        self.cores.insert(cu.id.clone(), cu.cores);
        Ok(self
            .sus
            .entry(cu.id.clone())
            .or_insert_with(|| SchedulableUnit::for_cu(cu)))
    }

    pub fn su(&self, cu: &CuId) -> Option<&SchedulableUnit> {
        self.sus.get(cu)
    }

    pub fn bound_pilot(&self, cu: &CuId) -> Option<&PilotId> {
        self.sus.get(cu).and_then(|su| su.bound_pilot.as_ref())
    }

    /// Units in submission order.
    pub fn in_order(&self) -> impl Iterator<Item = &SchedulableUnit> {
        self.order.iter().map(|id| &self.sus[id])
    }

    pub fn cores_of(&self, cu: &CuId) -> u32 {
        self.cores.get(cu).copied().unwrap_or(1)
    }

    /// Starts a new epoch and returns its number.
    pub fn next_epoch(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }

    /// Runs the binding pass for `eligible` (unbound units in submission
    /// order). Does not record the bindings; see [`Scheduler::mark_bound`].
    pub fn plan(&mut self, eligible: &[CuId], pilots: &[PilotView], placement: &Placement) -> Vec<Binding> {
        let requests: Vec<BindRequest<'_>> = eligible
            .iter()
            .filter_map(|id| self.sus.get(id))
            .filter(|su| !su.is_bound())
            .map(|su| BindRequest {
                su,
                cores: self.cores[&su.cu_id],
            })
            .collect();
        let mut cursor = self.rr_cursor;
        let out = bind(&requests, pilots, placement, self.policy, &mut cursor);
        self.rr_cursor = cursor;
        out
    }

    pub fn mark_bound(&mut self, cu: &CuId, pilot: PilotId, t: Tick) -> Result<(), SchedulerError> {
        self.sus
            .get_mut(cu)
            .ok_or_else(|| SchedulerError::UnknownSu(cu.clone()))?
            .bind(pilot, t);
        Ok(())
    }

    pub fn unbind(&mut self, cu: &CuId) {
        if let Some(su) = self.sus.get_mut(cu) {
            su.unbind();
        }
    }
}
