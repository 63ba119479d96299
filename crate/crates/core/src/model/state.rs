use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Pilot,
    Cu,
    Du,
}

impl EntityKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EntityKind::Pilot => "pilot",
            EntityKind::Cu => "cu",
            EntityKind::Du => "du",
        }
    }

    pub fn from_prefix(prefix: &str) -> Option<Self> {
        match prefix {
            "pilot" => Some(EntityKind::Pilot),
            "cu" => Some(EntityKind::Cu),
            "du" => Some(EntityKind::Du),
            _ => None,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// A lifecycle state machine.
pub trait Lifecycle: Copy + Eq + fmt::Debug + Serialize + DeserializeOwned + Send + Sync + 'static {
    const KIND: EntityKind;
    const INITIAL: Self;

    fn name(self) -> &'static str;

    fn parse(name: &str) -> Option<Self>;

    /// Whether `self -> to` is an edge of the machine. Guards that depend on
    /// entity data (retry budgets) are checked by the caller.
    fn can_become(self, to: Self) -> bool;

    fn is_terminal(self) -> bool;
}

macro_rules! state_names {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(Lifecycle::name(*self))
            }
        }

        impl $ty {
            fn state_name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }

            fn parse_name(n: &str) -> Option<$ty> {
                match n { $($name => Some($ty::$variant),)+ _ => None }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PilotState {
    New,
    Queued,
    Running,
    Done,
    Failed,
    Canceled,
}

state_names!(PilotState {
    New => "NEW",
    Queued => "QUEUED",
    Running => "RUNNING",
    Done => "DONE",
    Failed => "FAILED",
    Canceled => "CANCELED",
});

impl Lifecycle for PilotState {
    const KIND: EntityKind = EntityKind::Pilot;
    const INITIAL: Self = PilotState::New;

    fn name(self) -> &'static str {
        self.state_name()
    }

    fn parse(name: &str) -> Option<Self> {
        Self::parse_name(name)
    }

    fn can_become(self, to: Self) -> bool {
        use PilotState::*;
        matches!(
            (self, to),
            (New, Queued)
                | (Queued, Running)
                | (Running, Done)
                | (Running, Failed)
                | (Running, Canceled)
                | (New, Canceled)
                | (Queued, Canceled)
        )
    }

    fn is_terminal(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed | PilotState::Canceled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CuState {
    New,
    Unscheduled,
    Pending,
    Staging,
    Running,
    Done,
    Failed,
    Canceled,
}

state_names!(CuState {
    New => "NEW",
    Unscheduled => "UNSCHEDULED",
    Pending => "PENDING",
    Staging => "STAGING",
    Running => "RUNNING",
    Done => "DONE",
    Failed => "FAILED",
    Canceled => "CANCELED",
});

impl CuState {
    /// States in which the unit holds slots on its pilot.
    pub fn occupies_slots(self) -> bool {
        matches!(self, CuState::Staging | CuState::Running)
    }
}

impl Lifecycle for CuState {
    const KIND: EntityKind = EntityKind::Cu;
    const INITIAL: Self = CuState::New;

    fn name(self) -> &'static str {
        self.state_name()
    }

    fn parse(name: &str) -> Option<Self> {
        Self::parse_name(name)
    }

    fn can_become(self, to: Self) -> bool {
        use CuState::*;
        if to == Canceled {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (New, Unscheduled)
                | (Unscheduled, Pending)
                | (Pending, Staging)
                // walltime/cancel refund of a bound but unstarted unit
                | (Pending, Unscheduled)
                | (Staging, Running)
                // staging failure or pilot loss during staging
                | (Staging, Failed)
                | (Running, Done)
                | (Running, Failed)
                // retry, guarded by the retry budget
                | (Failed, Unscheduled)
        )
    }

    fn is_terminal(self) -> bool {
        matches!(self, CuState::Done | CuState::Failed | CuState::Canceled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DuState {
    New,
    Transferring,
    Ready,
    Failed,
    Removed,
}

state_names!(DuState {
    New => "NEW",
    Transferring => "TRANSFERRING",
    Ready => "READY",
    Failed => "FAILED",
    Removed => "REMOVED",
});

impl Lifecycle for DuState {
    const KIND: EntityKind = EntityKind::Du;
    const INITIAL: Self = DuState::New;

    fn name(self) -> &'static str {
        self.state_name()
    }

    fn parse(name: &str) -> Option<Self> {
        Self::parse_name(name)
    }

    fn can_become(self, to: Self) -> bool {
        use DuState::*;
        matches!(
            (self, to),
            (New, Transferring)
                | (New, Failed)
                | (Transferring, Ready)
                | (Transferring, Failed)
                | (Ready, Transferring)
                | (Ready, Removed)
                | (Failed, Removed)
        )
    }

    fn is_terminal(self) -> bool {
        matches!(self, DuState::Failed | DuState::Removed)
    }
}
