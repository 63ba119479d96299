//! Domain entities: pilots, compute units, data units and schedulable units.

mod affinity;
mod state;
mod validate;

pub use affinity::{affinity_distance, is_valid_affinity, site_of};
pub use state::{CuState, DuState, EntityKind, Lifecycle, PilotState};
pub use validate::{validate_manifest, Violation};

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Identifier of a pilot (and of the store attached to it).
    PilotId
);
id_type!(
    /// Identifier of a compute unit.
    CuId
);
id_type!(
    /// Identifier of a data unit.
    DuId
);

/// Timestamp carried by every event: virtual seconds under the sim backend,
/// milliseconds since run start under the local backend.
pub type Tick = u64;

/// Symbolic initial store for data units pulled from outside any pilot.
pub const EXTERNAL_STORE: &str = "external";

/// Execution backend named by a pilot's resource string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    Local,
}

impl BackendKind {
    /// Time unit of log timestamps under this backend.
    pub fn time_unit(self) -> &'static str {
        match self {
            BackendKind::Sim => "s",
            BackendKind::Local => "ms",
        }
    }

    /// Number of ticks in one second.
    pub fn ticks_per_second(self) -> f64 {
        match self {
            BackendKind::Sim => 1.0,
            BackendKind::Local => 1000.0,
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Sim => "sim",
            BackendKind::Local => "local",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "local" => Ok(BackendKind::Local),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// Parses a pilot resource string: `local://` or `sim://<site>`.
pub fn parse_resource(resource: &str) -> Option<(BackendKind, &str)> {
    if resource == "local://" {
        Some((BackendKind::Local, ""))
    } else if let Some(site) = resource.strip_prefix("sim://") {
        (!site.is_empty() && !site.contains('/')).then_some((BackendKind::Sim, site))
    } else {
        None
    }
}

fn default_cores() -> u32 {
    1
}

/// A resource placeholder: a set of slots held for `walltime_s` plus an
/// attached data store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDescription {
    pub id: PilotId,
    pub resource: String,
    pub cores: u32,
    pub walltime_s: u64,
    pub affinity: String,
    #[serde(default)]
    pub store_capacity_bytes: u64,
    #[serde(default)]
    pub queue_delay_s: u64,
}

impl PilotDescription {
    pub fn backend(&self) -> Option<BackendKind> {
        parse_resource(&self.resource).map(|(kind, _)| kind)
    }

    /// Site used for bandwidth lookups: the first affinity component.
    pub fn site(&self) -> &str {
        site_of(&self.affinity)
    }
}

/// A unit of compute work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeUnitDescription {
    pub id: CuId,
    pub executable: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_cores")]
    pub cores: u32,
    #[serde(default)]
    pub input_data: Vec<DuId>,
    #[serde(default)]
    pub output_data: Vec<DuId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_duration_s: Option<f64>,
    #[serde(default)]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sim_fail: bool,
}

impl ComputeUnitDescription {
    /// Minimal CU running `executable` on one core.
    pub fn new(id: impl Into<CuId>, executable: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            executable: executable.into(),
            args: Vec::new(),
            cores: 1,
            input_data: Vec::new(),
            output_data: Vec::new(),
            sim_duration_s: None,
            max_retries: 0,
            sim_fail: false,
        }
    }

    /// Simulated run time in whole virtual seconds (fractions round up).
    pub fn sim_ticks(&self) -> Option<Tick> {
        self.sim_duration_s.map(|d| d.ceil().max(0.0) as Tick)
    }
}

/// An immutable named set of files.
///
/// `initial_store` is a pilot id, [`EXTERNAL_STORE`], or absent for data
/// units produced as the output of a compute unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataUnitDescription {
    pub id: DuId,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    #[serde(default)]
    pub affinity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_store: Option<String>,
}

impl DataUnitDescription {
    pub fn is_external(&self) -> bool {
        self.initial_store.as_deref() == Some(EXTERNAL_STORE)
    }

    pub fn is_produced(&self) -> bool {
        self.initial_store.is_none()
    }
}

/// The scheduler's fusion of one compute unit with its input data units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulableUnit {
    pub cu_id: CuId,
    pub du_ids: Vec<DuId>,
    pub bound_pilot: Option<PilotId>,
    pub bind_time: Option<Tick>,
}

impl SchedulableUnit {
    pub fn for_cu(cu: &ComputeUnitDescription) -> Self {
        Self {
            cu_id: cu.id.clone(),
            du_ids: cu.input_data.clone(),
            bound_pilot: None,
            bind_time: None,
        }
    }

    pub fn is_bound(&self) -> bool {
        self.bound_pilot.is_some()
    }

    pub fn bind(&mut self, pilot: PilotId, t: Tick) {
        self.bound_pilot = Some(pilot);
        self.bind_time = Some(t);
    }

    pub fn unbind(&mut self) {
        self.bound_pilot = None;
        self.bind_time = None;
    }
}

/// Reference to any entity by kind and id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntityRef {
    Pilot(PilotId),
    Cu(CuId),
    Du(DuId),
}

impl EntityRef {
    pub fn kind(&self) -> EntityKind {
        match self {
            EntityRef::Pilot(_) => EntityKind::Pilot,
            EntityRef::Cu(_) => EntityKind::Cu,
            EntityRef::Du(_) => EntityKind::Du,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            EntityRef::Pilot(id) => id.as_str(),
            EntityRef::Cu(id) => id.as_str(),
            EntityRef::Du(id) => id.as_str(),
        }
    }

    /// Coordination-store key, `kind/id`.
    pub fn key(&self) -> String {
        entity_key(self.kind(), self.id())
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind(), self.id())
    }
}

pub fn entity_key(kind: EntityKind, id: &str) -> String {
    format!("{}/{}", kind.prefix(), id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resource_parsing() {
        assert_eq!(parse_resource("local://"), Some((BackendKind::Local, "")));
        assert_eq!(parse_resource("sim://site-a"), Some((BackendKind::Sim, "site-a")));
        assert_eq!(parse_resource("sim://"), None);
        assert_eq!(parse_resource("ssh://host"), None);
    }

    #[test]
    fn sim_ticks_round_up() {
        let mut cu = ComputeUnitDescription::new("c1", "true");
        cu.sim_duration_s = Some(2.2);
        assert_eq!(cu.sim_ticks(), Some(3));
        cu.sim_duration_s = Some(5.0);
        assert_eq!(cu.sim_ticks(), Some(5));
    }

    #[test]
    fn su_preserves_input_order() {
        let mut cu = ComputeUnitDescription::new("c1", "true");
        cu.input_data = vec!["d2".into(), "d1".into()];
        let su = SchedulableUnit::for_cu(&cu);
        assert_eq!(su.du_ids, vec![DuId::from("d2"), DuId::from("d1")]);
        assert!(!su.is_bound());
        assert_eq!(su.bind_time, None);
    }
}
