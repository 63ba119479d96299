//! Seeded workload generators used by tests, benchmarks and the acceptance
//! suite.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{BandwidthMatrix, WorkloadManifest};
use crate::model::{
    ComputeUnitDescription, CuId, DataUnitDescription, DuId, PilotDescription, PilotId, EXTERNAL_STORE,
};

const MB: u64 = 1_000_000;

fn sim_pilot(id: String, site: &str, affinity: String, cores: u32) -> PilotDescription {
    PilotDescription {
        id: id.into(),
        resource: format!("sim://{site}"),
        cores,
        walltime_s: 100_000,
        affinity,
        store_capacity_bytes: 1_000 * MB,
        queue_delay_s: 0,
    }
}

fn sim_cu(id: String, duration: f64) -> ComputeUnitDescription {
    let mut cu = ComputeUnitDescription::new(id, "true");
    cu.sim_duration_s = Some(duration);
    cu
}

fn placed_du(id: String, size: u64, affinity: String, store: &str) -> DataUnitDescription {
    DataUnitDescription {
        files: vec![format!("{id}.dat")],
        id: id.into(),
        size_bytes: Some(size),
        affinity,
        initial_store: Some(store.to_owned()),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, sites: &[&str]) -> BandwidthMatrix {
    let n = sites.len();
    let mut matrix = vec![vec![1e9; n]; n];
    for (i, j) in (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))) {
        let rate = f64::from(rng.gen_range(1u32..=20)) * 500_000.0;
        matrix[i][j] = rate;
        matrix[j][i] = rate;
    }
    BandwidthMatrix {
        sites: sites.iter().map(|s| (*s).to_owned()).collect(),
        matrix,
    }
}

/// A random sim workload of at most 10 pilots, 100 compute units and 50
/// data units, exercising staging, outputs, retries, walltime expiry,
/// unsatisfiable core demands and (sometimes) a run budget.
pub fn random_workload(seed: u64) -> WorkloadManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = ["a", "b", "c"];

    let n_pilots = rng.gen_range(1..=10);
    let pilots: Vec<PilotDescription> = (0..n_pilots)
        .map(|i| {
            let site = sites[rng.gen_range(0..sites.len())];
            let mut p = sim_pilot(
                format!("p{i:02}"),
                site,
                format!("{site}/r{}", rng.gen_range(0..3)),
                rng.gen_range(1..=8),
            );
            p.walltime_s = rng.gen_range(30..=600);
            p.queue_delay_s = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..=20) };
            p.store_capacity_bytes = rng.gen_range(20..=400) * MB;
            p
        })
        .collect();
    let max_cores = pilots.iter().map(|p| p.cores).max().unwrap_or(1);

    let n_placed = rng.gen_range(0..=30);
    let mut data_units: Vec<DataUnitDescription> = (0..n_placed)
        .map(|i| {
            let store = if rng.gen_bool(0.8) {
                pilots[rng.gen_range(0..pilots.len())].id.to_string()
            } else {
                EXTERNAL_STORE.to_owned()
            };
            let affinity = format!("{}/r{}", sites[rng.gen_range(0..sites.len())], rng.gen_range(0..3));
            placed_du(format!("d{i:02}"), rng.gen_range(1..=30) * MB, affinity, &store)
        })
        .collect();
    let mut pool: Vec<DuId> = data_units.iter().map(|d| d.id.clone()).collect();

    let n_cus = rng.gen_range(1..=100);
    let mut compute_units = Vec::with_capacity(n_cus);
    for i in 0..n_cus {
        let mut cu = sim_cu(format!("c{i:03}"), f64::from(rng.gen_range(2u32..=60)) / 2.0);
        cu.cores = if rng.gen_bool(0.03) {
            max_cores + 1
        } else {
            rng.gen_range(1..=max_cores.min(4))
        };
        let n_inputs = rng.gen_range(0..=3).min(pool.len());
        cu.input_data = pool.choose_multiple(&mut rng, n_inputs).cloned().collect();
        if data_units.len() < 50 && rng.gen_bool(0.25) {
            let id = DuId::from(format!("d{:02}", data_units.len()));
            data_units.push(DataUnitDescription {
                id: id.clone(),
                files: vec![format!("{id}.out")],
                size_bytes: Some(rng.gen_range(1..=20) * MB),
                affinity: String::new(),
                initial_store: None,
            });
            cu.output_data = vec![id.clone()];
            pool.push(id);
        }
        cu.max_retries = rng.gen_range(0..=2);
        cu.sim_fail = rng.gen_bool(0.05);
        compute_units.push(cu);
    }

    WorkloadManifest {
        pilots,
        data_units,
        compute_units,
        bandwidth: Some(random_matrix(&mut rng, &["a", "b", "c", EXTERNAL_STORE])),
        t_max_s: rng.gen_bool(0.1).then(|| rng.gen_range(20..=200)),
        seed: Some(seed),
    }
}

/// Two sites with one 10-core pilot each and 20 compute units, each reading
/// one 10 MB data unit pinned to one of the sites (ten per site, in shuffled
/// order). Links inside a site are effectively instant; the link between
/// sites runs at 1 MB/s.
pub fn two_site_workload(seed: u64) -> WorkloadManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut homes: Vec<&str> = ["a"; 10].into_iter().chain(["b"; 10]).collect();
    homes.shuffle(&mut rng);

    let pilots = vec![
        sim_pilot("pa".into(), "a", "a".into(), 10),
        sim_pilot("pb".into(), "b", "b".into(), 10),
    ];
    let mut data_units = Vec::new();
    let mut compute_units = Vec::new();
    for (i, site) in homes.iter().enumerate() {
        let du = format!("d{i:02}");
        data_units.push(placed_du(du.clone(), 10 * MB, (*site).to_owned(), &format!("p{site}")));
        let mut cu = sim_cu(format!("c{i:02}"), 10.0);
        cu.input_data = vec![du.into()];
        compute_units.push(cu);
    }
    let instant = 1e15;
    WorkloadManifest {
        pilots,
        data_units,
        compute_units,
        bandwidth: Some(BandwidthMatrix {
            sites: vec!["a".into(), "b".into(), EXTERNAL_STORE.into()],
            matrix: vec![
                vec![instant, 1e6, 1e6],
                vec![1e6, instant, 1e6],
                vec![1e6, 1e6, instant],
            ],
        }),
        t_max_s: None,
        seed: Some(seed),
    }
}

/// One small instance (at most 3 pilots and 6 compute units) for comparing
/// greedy binding with the exhaustive oracle. Inputs are never shared and
/// nothing is produced, so staging depends on initial placement only.
pub fn small_instance(seed: u64) -> WorkloadManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = ["a", "b"];
    let n_pilots = rng.gen_range(1..=3);
    let pilots: Vec<PilotDescription> = (0..n_pilots)
        .map(|i| {
            let site = sites[rng.gen_range(0..sites.len())];
            let mut p = sim_pilot(format!("p{i}"), site, site.to_owned(), rng.gen_range(1..=2));
            p.queue_delay_s = rng.gen_range(0..=3);
            p
        })
        .collect();
    let max_cores = pilots.iter().map(|p| p.cores).max().unwrap_or(1);
    let n_cus = rng.gen_range(2..=6);
    let mut data_units = Vec::new();
    let mut compute_units = Vec::new();
    for i in 0..n_cus {
        let mut cu = sim_cu(format!("c{i}"), f64::from(rng.gen_range(1u32..=10)));
        cu.cores = rng.gen_range(1..=max_cores);
        if rng.gen_bool(0.5) {
            let store = if rng.gen_bool(0.8) {
                pilots[rng.gen_range(0..pilots.len())].id.to_string()
            } else {
                EXTERNAL_STORE.to_owned()
            };
            let du = format!("d{i}");
            data_units.push(placed_du(du.clone(), rng.gen_range(1..=5) * MB, String::new(), &store));
            cu.input_data = vec![du.into()];
        }
        compute_units.push(cu);
    }
    WorkloadManifest {
        pilots,
        data_units,
        compute_units,
        bandwidth: None,
        t_max_s: None,
        seed: Some(seed),
    }
}

/// The bundled 25-instance suite for the oracle bound.
pub fn small_suite() -> Vec<WorkloadManifest> {
    (0..25).map(|i| small_instance(1000 + i)).collect()
}

/// An instance where exactly one running pilot holds every input of the
/// probe unit and has room for it. Other pilots have lower ids, labels
/// closer to the inputs' affinity, and no queued work.
pub struct LocalityCase {
    pub manifest: WorkloadManifest,
    pub probe: CuId,
    pub holder: PilotId,
}

pub fn locality_case(seed: u64) -> LocalityCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = ["a", "b", "c"];
    let n_pilots = rng.gen_range(2..=6);
    let pilots: Vec<PilotDescription> = (0..n_pilots)
        .map(|i| {
            let site = sites[rng.gen_range(0..sites.len())];
            sim_pilot(
                format!("p{i}"),
                site,
                format!("{site}/r{}", rng.gen_range(0..2)),
                rng.gen_range(1..=4),
            )
        })
        .collect();
    let holder = rng.gen_range(0..n_pilots);
    let decoy = (holder + 1) % n_pilots;
    let n_inputs = rng.gen_range(1..=3);
    let mut data_units = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..n_inputs {
        let id = format!("in{i}");
        data_units.push(placed_du(
            id.clone(),
            rng.gen_range(1..=50) * MB,
            pilots[decoy].affinity.clone(),
            pilots[holder].id.as_str(),
        ));
        inputs.push(DuId::from(id));
    }
    // unrelated data on the other pilots
    for (i, p) in pilots.iter().enumerate().filter(|(i, _)| *i != holder) {
        data_units.push(placed_du(
            format!("x{i}"),
            rng.gen_range(1..=50) * MB,
            p.affinity.clone(),
            p.id.as_str(),
        ));
    }
    let mut probe = sim_cu("probe".into(), 5.0);
    probe.cores = rng.gen_range(1..=pilots[holder].cores);
    probe.input_data = inputs;
    LocalityCase {
        probe: probe.id.clone(),
        holder: pilots[holder].id.clone(),
        manifest: WorkloadManifest {
            pilots,
            data_units,
            compute_units: vec![probe],
            bandwidth: None,
            t_max_s: None,
            seed: Some(seed),
        },
    }
}

/// `n` no-op compute units over `pilots` local pilots of `cores` cores.
pub fn noop_local_workload(n: usize, pilots: usize, cores: u32) -> WorkloadManifest {
    WorkloadManifest {
        pilots: (0..pilots)
            .map(|i| PilotDescription {
                id: format!("p{i}").into(),
                resource: "local://".into(),
                cores,
                walltime_s: 3600,
                affinity: format!("local/n{i}"),
                store_capacity_bytes: 0,
                queue_delay_s: 0,
            })
            .collect(),
        data_units: Vec::new(),
        compute_units: (0..n)
            .map(|i| ComputeUnitDescription::new(format!("c{i:03}"), "true"))
            .collect(),
        bandwidth: None,
        t_max_s: None,
        seed: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_workloads_validate() {
        for seed in 0..200 {
            let m = random_workload(seed);
            assert_eq!(m.validate(), vec![], "seed {seed}");
            assert!(m.pilots.len() <= 10 && m.compute_units.len() <= 100 && m.data_units.len() <= 50);
        }
        for m in small_suite() {
            assert_eq!(m.validate(), vec![]);
            assert!(m.pilots.len() <= 3 && m.compute_units.len() <= 6);
        }
        for seed in 0..50 {
            assert_eq!(locality_case(seed).manifest.validate(), vec![]);
        }
        assert_eq!(two_site_workload(7).validate(), vec![]);
        assert_eq!(noop_local_workload(10, 2, 4).validate(), vec![]);
    }

    #[test]
    fn same_seed_same_workload() {
        assert_eq!(random_workload(42), random_workload(42));
        assert_ne!(random_workload(42), random_workload(43));
    }

    #[test]
    fn two_site_split_is_even() {
        let m = two_site_workload(3);
        let on_a = m
            .data_units
            .iter()
            .filter(|d| d.initial_store.as_deref() == Some("pa"))
            .count();
        assert_eq!(on_a, 10);
        assert_eq!(m.compute_units.len(), 20);
    }
}
