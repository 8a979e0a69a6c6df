//! Guest lifecycle: spawn, warm up, snapshot, then serve requests one at a
//! time with a rollback between them.

pub mod fork;
pub mod guest;
pub mod protocol;
pub mod serve;
pub mod spawn;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::dirty::Backend;
use crate::error::{Error, Result};
use crate::restore::RestoreOptions;
use crate::snapshot::SnapshotPolicy;
pub use guest::{Exchange, GuestHandle};
pub use protocol::RequestEnvelope;
pub use spawn::SpawnConfig;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Plain warm reuse with no isolation.
    Base,
    /// Snapshot after warm-up, restore after every request.
    Gh,
    /// Tracking without restoring.
    GhNop,
    /// A fresh fork of the warm template per request.
    Fork,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::Gh, Mode::GhNop, Mode::Fork];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Gh => "gh",
            Mode::GhNop => "gh-nop",
            Mode::Fork => "fork",
        }
    }

    pub fn traced(self) -> bool {
        self != Mode::Base
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected base, gh, gh-nop or fork)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuestState {
    Spawned,
    Warming,
    Clean,
    Executing,
    Responded,
    Restoring,
    Dead,
}

impl GuestState {
    /// Whether `self -> to` is allowed. A timed-out request may go straight
    /// from `Executing` to `Restoring`.
    pub fn can_become(self, to: GuestState) -> bool {
        use GuestState::*;
        matches!(
            (self, to),
            (_, Dead)
                | (Spawned, Warming)
                | (Warming, Clean)
                | (Clean, Executing)
                | (Executing, Responded)
                | (Executing, Restoring)
                | (Responded, Restoring)
                | (Responded, Clean)
                | (Restoring, Clean)
        ) && self != Dead
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FdPolicy {
    /// New descriptors after a request are a divergence.
    #[default]
    Strict,
    /// New descriptors are logged and tolerated.
    Permissive,
}

#[derive(Clone, Debug)]
pub struct ManagerConfig {
    pub mode: Mode,
    pub spawn: SpawnConfig,
    pub skip_same_domain: bool,
    pub fd_policy: FdPolicy,
    pub restore: RestoreOptions,
    pub snapshot: SnapshotPolicy,
    pub timeout: Duration,
    pub max_queue: Option<usize>,
    /// Wait for the guest's DONE byte on fd 3 after each response.
    pub direct_signal: bool,
    /// Dirty tracking backend; detected when unset.
    pub backend: Option<Backend>,
    /// Prefix guest stderr lines with the pid and copy them to ours.
    pub forward_stderr: bool,
}

impl ManagerConfig {
    pub fn new(mode: Mode, spawn: SpawnConfig) -> Self {
        ManagerConfig {
            mode,
            spawn,
            skip_same_domain: false,
            fd_policy: FdPolicy::Strict,
            restore: RestoreOptions::default(),
            snapshot: SnapshotPolicy::default(),
            timeout: DEFAULT_TIMEOUT,
            max_queue: None,
            direct_signal: false,
            backend: None,
            forward_stderr: true,
        }
    }
}
