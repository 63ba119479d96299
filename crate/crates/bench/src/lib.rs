//! Benchmark fixtures.

use std::collections::{BTreeMap, BTreeSet};

use pilot_core::model::SchedulableUnit;
use pilot_core::scheduler::{BindRequest, DuPlacement, PilotView, Placement};
use pilot_core::{DuId, PilotId};

/// One scheduling epoch's inputs: every unit reads two of `n_dus` data units
/// spread round the pilots, and every pilot has spare cores.
pub struct EpochFixture {
    pub sus: Vec<SchedulableUnit>,
    pub cores: Vec<u32>,
    pub pilots: Vec<PilotView>,
    pub placement: Placement,
}

impl EpochFixture {
    pub fn new(n_cus: usize, n_pilots: usize, n_dus: usize) -> Self {
        let pilots: Vec<PilotView> = (0..n_pilots)
            .map(|i| PilotView {
                id: PilotId::from(format!("p{i:03}")),
                affinity: format!("site{}/rack{}", i % 3, i % 7),
                free_cores: 16,
                queued_load: (i % 5) as u32,
            })
            .collect();
        let dus = (0..n_dus)
            .map(|i| {
                let holder = pilots[(i * 7) % n_pilots].id.clone();
                let placement = DuPlacement {
                    size_bytes: 1_000_000 * (1 + (i % 13) as u64),
                    affinity: format!("site{}", i % 3),
                    replicas: BTreeSet::from([holder]),
                };
                (DuId::from(format!("d{i:04}")), placement)
            })
            .collect::<BTreeMap<_, _>>();
        let sus = (0..n_cus)
            .map(|i| SchedulableUnit {
                cu_id: format!("c{i:05}").into(),
                du_ids: vec![
                    DuId::from(format!("d{:04}", i % n_dus)),
                    DuId::from(format!("d{:04}", (i * 31 + 5) % n_dus)),
                ],
                bound_pilot: None,
                bind_time: None,
            })
            .collect();
        Self {
            sus,
            cores: (0..n_cus).map(|i| 1 + (i % 4) as u32).collect(),
            pilots,
            placement: Placement { dus },
        }
    }

    pub fn requests(&self) -> Vec<BindRequest<'_>> {
        self.sus
            .iter()
            .zip(&self.cores)
            .map(|(su, &cores)| BindRequest { su, cores })
            .collect()
    }
}
