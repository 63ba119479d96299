//! The Pilot Data Service: data units, the per-pilot stores that hold their
//! replicas, and transfers between stores.
//!
//! Local stores are directories laid out as `<root>/<du_id>/<files...>`.
//! Virtual stores only account bytes. `used_bytes` counts complete replicas;
//! bytes of in-flight transfers are reserved separately so the capacity
//! bound holds while copies are running.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ledger::{EntityRecord, EventKind, Ledger, TransitionError};
use crate::manifest::{bandwidth_between, transfer_ticks, BandwidthMatrix};
use crate::model::{entity_key, DataUnitDescription, DuId, DuState, EntityKind, PilotId, Tick, EXTERNAL_STORE};
use crate::scheduler::{DuPlacement, Placement};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown store `{0}`")]
    UnknownStore(String),
    #[error("unknown data unit `{0}`")]
    UnknownDu(DuId),
    #[error("duplicate data unit `{0}`")]
    DuplicateDu(DuId),
    #[error("store `{store}` cannot hold {needed} bytes ({free} free)")]
    CapacityExceeded { store: PilotId, needed: u64, free: u64 },
    #[error("no source holds data unit `{0}`")]
    SourceUnavailable(DuId),
    #[error("data unit `{0}` is already being transferred to that store")]
    TransferInProgress(DuId),
    #[error("data unit `{du}`: {source}")]
    Io { du: DuId, source: io::Error },
    #[error(transparent)]
    Ledger(#[from] TransitionError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreRoot {
    Virtual,
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct PilotStore {
    pub pilot_id: PilotId,
    pub root: StoreRoot,
    pub site: String,
    pub capacity_bytes: u64,
    pub used_bytes: u64,
    reserved_bytes: u64,
}

impl PilotStore {
    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes
            .saturating_sub(self.used_bytes + self.reserved_bytes)
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_bytes
    }

    /// Directory holding `du` in this store (local stores only).
    pub fn du_dir(&self, du: &DuId) -> Option<PathBuf> {
        match &self.root {
            StoreRoot::Dir(root) => Some(root.join(du.as_str())),
            StoreRoot::Virtual => None,
        }
    }
}

/// A completed copy of one data unit into one store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub du_id: DuId,
    /// Source store id, or `external`.
    pub from: String,
    pub to: PilotId,
    pub bytes: u64,
    pub start: Tick,
    pub end: Tick,
}

/// A transfer that has reserved capacity but not landed yet.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingTransfer {
    pub du_id: DuId,
    pub from: String,
    pub to: PilotId,
    pub bytes: u64,
    pub start: Tick,
    /// Link rate in bytes/s between the source and target sites.
    pub rate: f64,
    /// Local mode: directory the files are read from, and the target directory.
    pub src_dir: Option<PathBuf>,
    pub dst_dir: Option<PathBuf>,
    pub files: Vec<String>,
}

impl PendingTransfer {
    /// Virtual duration of the transfer.
    pub fn ticks(&self) -> Tick {
        transfer_ticks(self.bytes, self.rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransferStart {
    Resident,
    InFlight,
    Started(PendingTransfer),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataMode {
    Virtual,
    /// Files of `external` and pre-placed data units are read relative to
    /// `source_dir`.
    Local {
        source_dir: PathBuf,
    },
}

#[derive(Clone, Debug)]
struct DuEntry {
    desc: DataUnitDescription,
    size_bytes: u64,
    state: DuState,
    replicas: BTreeSet<PilotId>,
    in_flight: BTreeSet<PilotId>,
}

pub struct DataService {
    mode: DataMode,
    bandwidth: Option<BandwidthMatrix>,
    stores: BTreeMap<PilotId, PilotStore>,
    dus: BTreeMap<DuId, DuEntry>,
    transfers: Vec<TransferRecord>,
}

impl DataService {
    pub fn new(mode: DataMode, bandwidth: Option<BandwidthMatrix>) -> Self {
        Self {
            mode,
            bandwidth,
            stores: BTreeMap::new(),
            dus: BTreeMap::new(),
            transfers: Vec::new(),
        }
    }

    pub fn add_store(&mut self, pilot: PilotId, site: &str, capacity_bytes: u64, root: StoreRoot) -> io::Result<()> {
        if let StoreRoot::Dir(dir) = &root {
            fs::create_dir_all(dir)?;
        }
        self.stores.insert(
            pilot.clone(),
            PilotStore {
                pilot_id: pilot,
                root,
                site: site.to_owned(),
                capacity_bytes,
                used_bytes: 0,
                reserved_bytes: 0,
            },
        );
        Ok(())
    }

    pub fn store(&self, pilot: &PilotId) -> Option<&PilotStore> {
        self.stores.get(pilot)
    }

    pub fn stores(&self) -> impl Iterator<Item = &PilotStore> {
        self.stores.values()
    }

    pub fn transfers(&self) -> &[TransferRecord] {
        &self.transfers
    }

    pub fn contains(&self, du: &DuId) -> bool {
        self.dus.contains_key(du)
    }

    pub fn size_of(&self, du: &DuId) -> Option<u64> {
        self.dus.get(du).map(|e| e.size_bytes)
    }

    pub fn files_of(&self, du: &DuId) -> Option<&[String]> {
        self.dus.get(du).map(|e| e.desc.files.as_slice())
    }

    pub fn replicas(&self, du: &DuId) -> Option<&BTreeSet<PilotId>> {
        self.dus.get(du).map(|e| &e.replicas)
    }

    pub fn state_of(&self, du: &DuId) -> Option<DuState> {
        self.dus.get(du).map(|e| e.state)
    }

    pub fn is_resident(&self, du: &DuId, pilot: &PilotId) -> bool {
        self.dus.get(du).is_some_and(|e| e.replicas.contains(pilot))
    }

    /// Whether a compute unit needing `du` could be staged now.
    pub fn is_available(&self, du: &DuId) -> bool {
        self.dus.get(du).is_some_and(|e| {
            !e.replicas.is_empty() && !matches!(e.state, DuState::Removed | DuState::Failed)
                || (e.desc.is_external() && e.state != DuState::Failed)
        })
    }

    /// Whether `du` can never become available.
    pub fn is_lost(&self, du: &DuId) -> bool {
        self.dus
            .get(du)
            .is_some_and(|e| matches!(e.state, DuState::Failed | DuState::Removed) && e.replicas.is_empty())
    }

    pub fn placement(&self) -> Placement {
        Placement {
            dus: self
                .dus
                .iter()
                .map(|(id, e)| {
                    (
                        id.clone(),
                        DuPlacement {
                            size_bytes: e.size_bytes,
                            affinity: e.desc.affinity.clone(),
                            replicas: e.replicas.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    fn transition(&mut self, ledger: &Ledger, du: &DuId, to: DuState, now: Tick, data: Value) -> Result<(), DataError> {
        let entry = self.dus.get_mut(du).ok_or_else(|| DataError::UnknownDu(du.clone()))?;
        ledger.transition(du.as_str(), entry.state, to, now, data)?;
        entry.state = to;
        Ok(())
    }

    fn land_replica(
        &mut self,
        ledger: &Ledger,
        du: &DuId,
        pilot: &PilotId,
        bytes: u64,
        now: Tick,
    ) -> Result<(), DataError> {
        ledger.add_replica(du.as_str(), pilot, now, json!({ "pilot": pilot, "bytes": bytes }))?;
        let entry = self.dus.get_mut(du).expect("checked by caller");
        entry.replicas.insert(pilot.clone());
        self.stores.get_mut(pilot).expect("checked by caller").used_bytes += bytes;
        Ok(())
    }

    fn check_free(&self, pilot: &PilotId, needed: u64) -> Result<(), DataError> {
        let store = self
            .stores
            .get(pilot)
            .ok_or_else(|| DataError::UnknownStore(pilot.to_string()))?;
        if needed > store.free_bytes() {
            return Err(DataError::CapacityExceeded {
                store: pilot.clone(),
                needed,
                free: store.free_bytes(),
            });
        }
        Ok(())
    }

    /// Registers a data unit. Pre-placed units are ingested into their
    /// initial store; `external` ones stay NEW and are pulled on first use;
    /// produced ones wait for [`DataService::register_output`].
    ///
    /// On `CapacityExceeded` the unit is still registered, in state FAILED.
    pub fn submit_du(&mut self, ledger: &Ledger, desc: DataUnitDescription, now: Tick) -> Result<DuId, DataError> {
        let id = desc.id.clone();
        if self.dus.contains_key(&id) {
            return Err(DataError::DuplicateDu(id));
        }
        let initial_pilot = match desc.initial_store.as_deref() {
            Some(EXTERNAL_STORE) | None => None,
            Some(store) => {
                let pilot = PilotId::from(store);
                if !self.stores.contains_key(&pilot) {
                    return Err(DataError::UnknownStore(store.to_owned()));
                }
                Some(pilot)
            }
        };
        let size_bytes = match (&self.mode, desc.is_produced()) {
            (DataMode::Local { source_dir }, false) => {
                files_size(source_dir, &desc.files).map_err(|source| DataError::Io { du: id.clone(), source })?
            }
            _ => desc.size_bytes.unwrap_or(0),
        };
        let source = desc.initial_store.clone().unwrap_or_else(|| "produced".into());
        ledger.create(
            id.as_str(),
            EntityRecord::new_du(now),
            json!({ "size_bytes": size_bytes, "affinity": desc.affinity, "source": source }),
        )?;
        self.dus.insert(
            id.clone(),
            DuEntry {
                desc,
                size_bytes,
                state: DuState::New,
                replicas: BTreeSet::new(),
                in_flight: BTreeSet::new(),
            },
        );

        if let Some(pilot) = initial_pilot {
            if let Err(e) = self.check_free(&pilot, size_bytes) {
                self.transition(ledger, &id, DuState::Failed, now, json!({ "reason": "capacity" }))?;
                return Err(e);
            }
            self.transition(ledger, &id, DuState::Transferring, now, json!({ "to": pilot }))?;
            if let DataMode::Local { source_dir } = &self.mode {
                let dst = self.stores[&pilot].du_dir(&id).expect("local store");
                let files = self.dus[&id].desc.files.clone();
                if let Err(source) = copy_files(source_dir, &dst, &files) {
                    self.transition(ledger, &id, DuState::Failed, now, json!({ "reason": "ingest" }))?;
                    return Err(DataError::Io { du: id, source });
                }
            }
            self.land_replica(ledger, &id, &pilot, size_bytes, now)?;
            self.transition(ledger, &id, DuState::Ready, now, Value::Null)?;
        }
        Ok(id)
    }

    fn pick_source(&self, entry: &DuEntry, target_site: &str) -> Option<(String, f64)> {
        let best = entry
            .replicas
            .iter()
            .filter_map(|p| self.stores.get(p))
            .map(|s| {
                (
                    s.pilot_id.to_string(),
                    bandwidth_between(self.bandwidth.as_ref(), &s.site, target_site),
                )
            })
            // highest rate, then smallest id
            .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        best.or_else(|| {
            entry.desc.is_external().then(|| {
                let rate = bandwidth_between(self.bandwidth.as_ref(), EXTERNAL_STORE, target_site);
                (EXTERNAL_STORE.to_owned(), rate)
            })
        })
    }

    /// Begins copying `du` into `target`'s store, reserving capacity.
    pub fn start_transfer(
        &mut self,
        ledger: &Ledger,
        du: &DuId,
        target: &PilotId,
        now: Tick,
    ) -> Result<TransferStart, DataError> {
        let entry = self.dus.get(du).ok_or_else(|| DataError::UnknownDu(du.clone()))?;
        let store = self
            .stores
            .get(target)
            .ok_or_else(|| DataError::UnknownStore(target.to_string()))?;
        if entry.replicas.contains(target) {
            return Ok(TransferStart::Resident);
        }
        if entry.in_flight.contains(target) {
            return Ok(TransferStart::InFlight);
        }
        if matches!(entry.state, DuState::Failed | DuState::Removed) {
            return Err(DataError::SourceUnavailable(du.clone()));
        }
        let (from, rate) = self
            .pick_source(entry, &store.site)
            .ok_or_else(|| DataError::SourceUnavailable(du.clone()))?;
        let bytes = entry.size_bytes;
        self.check_free(target, bytes)?;

        let (src_dir, dst_dir) = match &self.mode {
            DataMode::Virtual => (None, None),
            DataMode::Local { source_dir } => {
                let src = if from == EXTERNAL_STORE {
                    source_dir.clone()
                } else {
                    self.stores[&PilotId::from(from.as_str())]
                        .du_dir(du)
                        .expect("local store")
                };
                (Some(src), store.du_dir(du))
            }
        };
        let files = entry.desc.files.clone();
        if entry.state != DuState::Transferring {
            self.transition(ledger, du, DuState::Transferring, now, json!({ "to": target }))?;
        }
        let entry = self.dus.get_mut(du).expect("present");
        entry.in_flight.insert(target.clone());
        self.stores.get_mut(target).expect("present").reserved_bytes += bytes;
        Ok(TransferStart::Started(PendingTransfer {
            du_id: du.clone(),
            from,
            to: target.clone(),
            bytes,
            start: now,
            rate,
            src_dir,
            dst_dir,
            files,
        }))
    }

    fn settle_state(&mut self, ledger: &Ledger, du: &DuId, now: Tick) -> Result<(), DataError> {
        let entry = &self.dus[du];
        if entry.state == DuState::Transferring && entry.in_flight.is_empty() {
            let to = if entry.replicas.is_empty() {
                DuState::Failed
            } else {
                DuState::Ready
            };
            self.transition(ledger, du, to, now, Value::Null)?;
        }
        Ok(())
    }

    /// Lands a transfer at time `end`.
    pub fn complete_transfer(
        &mut self,
        ledger: &Ledger,
        pending: PendingTransfer,
        end: Tick,
    ) -> Result<TransferRecord, DataError> {
        let PendingTransfer {
            du_id,
            from,
            to,
            bytes,
            start,
            ..
        } = pending;
        {
            let store = self
                .stores
                .get_mut(&to)
                .ok_or_else(|| DataError::UnknownStore(to.to_string()))?;
            store.reserved_bytes -= bytes;
        }
        self.dus
            .get_mut(&du_id)
            .ok_or_else(|| DataError::UnknownDu(du_id.clone()))?
            .in_flight
            .remove(&to);
        self.land_replica(ledger, &du_id, &to, bytes, end)?;
        let record = TransferRecord {
            du_id: du_id.clone(),
            from,
            to,
            bytes,
            start,
            end,
        };
        ledger.note(
            end,
            EventKind::Transfer,
            entity_key(EntityKind::Du, du_id.as_str()),
            json!({
                "from": record.from,
                "to": record.to,
                "bytes": record.bytes,
                "start": record.start,
                "end": record.end,
            }),
        );
        self.transfers.push(record.clone());
        self.settle_state(ledger, &du_id, end)?;
        Ok(record)
    }

    /// Releases a transfer that did not land (local copy error).
    pub fn abort_transfer(&mut self, ledger: &Ledger, pending: &PendingTransfer, now: Tick) -> Result<(), DataError> {
        if let Some(store) = self.stores.get_mut(&pending.to) {
            store.reserved_bytes -= pending.bytes;
        }
        if let Some(entry) = self.dus.get_mut(&pending.du_id) {
            entry.in_flight.remove(&pending.to);
        }
        self.settle_state(ledger, &pending.du_id, now)
    }

    /// Copies `du` into `target`'s store and returns once it has landed.
    /// Virtual transfers end at `now + ceil(bytes / rate)`. A store that
    /// already holds the unit yields a zero-byte record.
    pub fn replicate(
        &mut self,
        ledger: &Ledger,
        du: &DuId,
        target: &PilotId,
        now: Tick,
    ) -> Result<TransferRecord, DataError> {
        match self.start_transfer(ledger, du, target, now)? {
            TransferStart::Resident => Ok(TransferRecord {
                du_id: du.clone(),
                from: target.to_string(),
                to: target.clone(),
                bytes: 0,
                start: now,
                end: now,
            }),
            TransferStart::InFlight => Err(DataError::TransferInProgress(du.clone())),
            TransferStart::Started(pending) => {
                let end = match (&pending.src_dir, &pending.dst_dir) {
                    (Some(src), Some(dst)) => {
                        if let Err(source) = copy_files(src, dst, &pending.files) {
                            self.abort_transfer(ledger, &pending, now)?;
                            return Err(DataError::Io { du: du.clone(), source });
                        }
                        now
                    }
                    _ => now + pending.ticks(),
                };
                self.complete_transfer(ledger, pending, end)
            }
        }
    }

    /// Places a produced data unit into the executing pilot's store. In local
    /// mode its files are read from `workdir` and the size is measured; in
    /// virtual mode the declared size is used.
    ///
    /// On failure the unit becomes FAILED.
    pub fn register_output(
        &mut self,
        ledger: &Ledger,
        du: &DuId,
        pilot: &PilotId,
        workdir: Option<&Path>,
        now: Tick,
    ) -> Result<(), DataError> {
        let entry = self.dus.get(du).ok_or_else(|| DataError::UnknownDu(du.clone()))?;
        if entry.replicas.contains(pilot) {
            return Ok(());
        }
        let files = entry.desc.files.clone();
        let size = match workdir {
            Some(dir) => match files_size(dir, &files) {
                Ok(size) => size,
                Err(source) => {
                    self.transition(ledger, du, DuState::Failed, now, json!({ "reason": "missing output" }))?;
                    return Err(DataError::Io { du: du.clone(), source });
                }
            },
            None => entry.size_bytes,
        };
        if let Err(e) = self.check_free(pilot, size) {
            self.transition(ledger, du, DuState::Failed, now, json!({ "reason": "capacity" }))?;
            return Err(e);
        }
        self.transition(ledger, du, DuState::Transferring, now, json!({ "to": pilot }))?;
        if let (Some(dir), Some(dst)) = (workdir, self.stores[pilot].du_dir(du)) {
            if let Err(source) = copy_files(dir, &dst, &files) {
                self.transition(ledger, du, DuState::Failed, now, json!({ "reason": "copy" }))?;
                return Err(DataError::Io { du: du.clone(), source });
            }
        }
        self.dus.get_mut(du).expect("present").size_bytes = size;
        self.land_replica(ledger, du, pilot, size, now)?;
        self.transition(ledger, du, DuState::Ready, now, Value::Null)?;
        Ok(())
    }

    /// Checks the store accounting invariants.
    pub fn check_conservation(&self) -> Result<(), String> {
        for store in self.stores.values() {
            let held: u64 = self
                .dus
                .values()
                .filter(|e| e.replicas.contains(&store.pilot_id))
                .map(|e| e.size_bytes)
                .sum();
            if held != store.used_bytes {
                return Err(format!(
                    "store {}: used_bytes {} but replicas sum to {held}",
                    store.pilot_id, store.used_bytes
                ));
            }
            if store.used_bytes + store.reserved_bytes > store.capacity_bytes {
                return Err(format!("store {} over capacity", store.pilot_id));
            }
        }
        for (id, e) in &self.dus {
            let consistent = match e.state {
                DuState::Ready => !e.replicas.is_empty(),
                DuState::New => e.replicas.is_empty(),
                _ => true,
            };
            if !consistent {
                return Err(format!("du {id}: state {} with {} replicas", e.state, e.replicas.len()));
            }
        }
        Ok(())
    }
}

fn files_size(base: &Path, files: &[String]) -> io::Result<u64> {
    files.iter().map(|f| fs::metadata(base.join(f)).map(|m| m.len())).sum()
}

/// Copies `files` (relative paths) from `src` to `dst`, creating
/// directories as needed. Returns the number of bytes copied.
pub fn copy_files(src: &Path, dst: &Path, files: &[String]) -> io::Result<u64> {
    let mut total = 0;
    for f in files {
        let to = dst.join(f);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        total += fs::copy(src.join(f), to)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::InMemoryStore;
    use crate::ledger::LogHeader;
    use crate::model::BackendKind;
    use std::sync::Arc;

    const MB: u64 = 1_000_000;

    fn ledger() -> Ledger {
        Ledger::new(Arc::new(InMemoryStore::new()), LogHeader::new(BackendKind::Sim, None))
    }

    fn du(id: &str, size: u64, store: Option<&str>) -> DataUnitDescription {
        DataUnitDescription {
            id: id.into(),
            files: vec![format!("{id}.bin")],
            size_bytes: Some(size),
            affinity: String::new(),
            initial_store: store.map(str::to_owned),
        }
    }

    fn service() -> DataService {
        let mut d = DataService::new(DataMode::Virtual, None);
        d.add_store("p1".into(), "a", 2 * MB, StoreRoot::Virtual).unwrap();
        d.add_store("p2".into(), "b", 2 * MB, StoreRoot::Virtual).unwrap();
        d
    }

    #[test]
    fn ingest_within_capacity() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("d1", MB, Some("p1")), 0).unwrap();
        assert_eq!(d.state_of(&"d1".into()), Some(DuState::Ready));
        assert_eq!(d.store(&"p1".into()).unwrap().used_bytes, MB);
        d.check_conservation().unwrap();
    }

    #[test]
    fn ingest_over_capacity() {
        let l = ledger();
        let mut d = service();
        let err = d.submit_du(&l, du("d1", 3 * MB, Some("p1")), 0).unwrap_err();
        assert!(matches!(err, DataError::CapacityExceeded { needed, free, .. } if needed == 3 * MB && free == 2 * MB));
        assert_eq!(d.state_of(&"d1".into()), Some(DuState::Failed));
        assert_eq!(d.store(&"p1".into()).unwrap().used_bytes, 0);
    }

    #[test]
    fn unknown_initial_store() {
        let l = ledger();
        let mut d = service();
        assert!(matches!(
            d.submit_du(&l, du("d1", 1, Some("p9")), 0),
            Err(DataError::UnknownStore(_))
        ));
    }

    #[test]
    fn external_is_lazy() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("d1", MB, Some(EXTERNAL_STORE)), 0).unwrap();
        assert_eq!(d.state_of(&"d1".into()), Some(DuState::New));
        assert!(d.replicas(&"d1".into()).unwrap().is_empty());
        assert!(d.is_available(&"d1".into()));
        let rec = d.replicate(&l, &"d1".into(), &"p2".into(), 4).unwrap();
        assert_eq!(
            (rec.from.as_str(), rec.bytes, rec.start, rec.end),
            ("external", MB, 4, 5)
        );
        assert_eq!(d.state_of(&"d1".into()), Some(DuState::Ready));
    }

    #[test]
    fn replicate_over_one_megabyte_link() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("d1", MB, Some("p1")), 0).unwrap();
        let rec = d.replicate(&l, &"d1".into(), &"p2".into(), 0).unwrap();
        assert_eq!(rec.end - rec.start, 1);
        assert_eq!(rec.from, "p1");
        let replicas: Vec<_> = d.replicas(&"d1".into()).unwrap().iter().cloned().collect();
        assert_eq!(replicas, vec![PilotId::from("p1"), PilotId::from("p2")]);
        // idempotent
        let again = d.replicate(&l, &"d1".into(), &"p2".into(), 3).unwrap();
        assert_eq!(again.bytes, 0);
        assert_eq!(d.transfers().len(), 1);
        d.check_conservation().unwrap();
    }

    #[test]
    fn replicate_over_capacity_leaves_replicas() {
        let l = ledger();
        let mut d = service();
        d.add_store("small".into(), "c", MB / 2, StoreRoot::Virtual).unwrap();
        d.submit_du(&l, du("d1", MB, Some("p1")), 0).unwrap();
        assert!(matches!(
            d.replicate(&l, &"d1".into(), &"small".into(), 0),
            Err(DataError::CapacityExceeded { .. })
        ));
        assert_eq!(d.replicas(&"d1".into()).unwrap().len(), 1);
        assert_eq!(d.state_of(&"d1".into()), Some(DuState::Ready));
    }

    #[test]
    fn produced_unit_lands_on_executor() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("out", MB, None), 0).unwrap();
        assert!(!d.is_available(&"out".into()));
        d.register_output(&l, &"out".into(), &"p2".into(), None, 7).unwrap();
        assert!(d.is_resident(&"out".into(), &"p2".into()));
        assert_eq!(d.state_of(&"out".into()), Some(DuState::Ready));
    }

    #[test]
    fn produced_unit_overflow_fails_unit() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("out", 3 * MB, None), 0).unwrap();
        assert!(d.register_output(&l, &"out".into(), &"p2".into(), None, 7).is_err());
        assert_eq!(d.state_of(&"out".into()), Some(DuState::Failed));
        assert!(d.is_lost(&"out".into()));
    }

    #[test]
    fn concurrent_transfers_reserve_capacity() {
        let l = ledger();
        let mut d = service();
        d.submit_du(&l, du("a", MB, Some("p1")), 0).unwrap();
        d.submit_du(&l, du("b", MB, Some("p1")), 0).unwrap();
        d.submit_du(&l, du("c", MB, Some("p1")), 0).unwrap_err();
        let TransferStart::Started(ta) = d.start_transfer(&l, &"a".into(), &"p2".into(), 0).unwrap() else {
            panic!()
        };
        assert_eq!(
            d.start_transfer(&l, &"a".into(), &"p2".into(), 0).unwrap(),
            TransferStart::InFlight
        );
        let TransferStart::Started(tb) = d.start_transfer(&l, &"b".into(), &"p2".into(), 0).unwrap() else {
            panic!()
        };
        assert_eq!(d.store(&"p2".into()).unwrap().free_bytes(), 0);
        assert_eq!(d.state_of(&"a".into()), Some(DuState::Transferring));
        d.complete_transfer(&l, ta, 1).unwrap();
        d.complete_transfer(&l, tb, 2).unwrap();
        assert_eq!(d.store(&"p2".into()).unwrap().used_bytes, 2 * MB);
        d.check_conservation().unwrap();
    }

    #[test]
    fn prefers_fastest_source() {
        let l = ledger();
        let bw = BandwidthMatrix {
            sites: vec!["a".into(), "b".into(), "c".into()],
            matrix: vec![vec![1e9, 1e3, 1e6], vec![1e3, 1e9, 1e3], vec![1e6, 1e3, 1e9]],
        };
        let mut d = DataService::new(DataMode::Virtual, Some(bw));
        for (p, s) in [("p1", "a"), ("p2", "b"), ("p3", "c")] {
            d.add_store(p.into(), s, 10 * MB, StoreRoot::Virtual).unwrap();
        }
        d.submit_du(&l, du("d", MB, Some("p2")), 0).unwrap();
        d.replicate(&l, &"d".into(), &"p3".into(), 0).unwrap();
        let rec = d.replicate(&l, &"d".into(), &"p1".into(), 1000).unwrap();
        assert_eq!(rec.from, "p3");
        assert_eq!(rec.end - rec.start, 1);
    }

    #[test]
    fn local_layout() {
        let src = tempfile::tempdir().unwrap();
        let work = tempfile::tempdir().unwrap();
        fs::write(src.path().join("x.txt"), b"hello").unwrap();
        fs::create_dir_all(src.path().join("sub")).unwrap();
        fs::write(src.path().join("sub/y.txt"), b"abc").unwrap();
        let l = ledger();
        let mut d = DataService::new(
            DataMode::Local {
                source_dir: src.path().into(),
            },
            None,
        );
        let root1 = work.path().join("p1/store");
        let root2 = work.path().join("p2/store");
        d.add_store("p1".into(), "a", 100, StoreRoot::Dir(root1.clone()))
            .unwrap();
        d.add_store("p2".into(), "a", 100, StoreRoot::Dir(root2.clone()))
            .unwrap();
        let mut desc = du("d1", 0, Some("p1"));
        desc.files = vec!["x.txt".into(), "sub/y.txt".into()];
        desc.size_bytes = None;
        d.submit_du(&l, desc, 0).unwrap();
        assert_eq!(d.size_of(&"d1".into()), Some(8));
        assert_eq!(fs::read(root1.join("d1/x.txt")).unwrap(), b"hello");
        let rec = d.replicate(&l, &"d1".into(), &"p2".into(), 1).unwrap();
        assert_eq!(rec.bytes, 8);
        assert_eq!(fs::read(root2.join("d1/sub/y.txt")).unwrap(), b"abc");
        d.check_conservation().unwrap();
    }
}
