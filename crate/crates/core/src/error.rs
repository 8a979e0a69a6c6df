use std::io;

use nix::errno::Errno;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("process {0} is gone")]
    ProcessGone(i32),
    #[error("malformed maps line: {0:?}")]
    Parse(String),
    #[error("short read from pagemap at {addr:#x}: wanted {wanted} records, got {got}")]
    ShortRead { addr: u64, wanted: usize, got: usize },
    #[error("partial transfer at {addr:#x}: {done} of {len} bytes")]
    PartialTransfer { addr: u64, done: usize, len: usize },
    #[error("permission denied accessing {addr:#x}")]
    PermissionDenied { addr: u64 },
    #[error("thread {0} is not ptrace-stopped")]
    NotStopped(i32),
    #[error("kernel does not support required tracking: {0}")]
    KernelUnsupported(String),
    #[error("writable shared mapping {start:#x}-{end:#x} ({what}) cannot be rolled back")]
    SharedWritableMapping { start: u64, end: u64, what: String },
    #[error("huge pages present in guest ({0} kB); not supported")]
    HugePages(u64),
    #[error("snapshot needs {needed} bytes, cap is {cap}")]
    OutOfMemory { needed: u64, cap: u64 },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("guest diverged: {0}")]
    GuestDiverged(String),
    #[error("no syscall instruction found in guest executable mappings")]
    GadgetNotFound,
    #[error("injected {name} returned {ret:#x}")]
    SyscallFailed { name: &'static str, ret: u64 },
    #[error("fixed mapping requested at {expected:#x} landed at {got:#x}")]
    AddressCollision { expected: u64, got: u64 },
    #[error("spawn failed: {0}")]
    SpawnFailed(String),
    #[error("ptrace attach failed: {0}")]
    AttachFailed(String),
    #[error("container lost: {0}")]
    ContainerLost(String),
    #[error("guest error: {0}")]
    GuestError(String),
    #[error("mode unsupported: {0}")]
    ModeUnsupported(String),
    #[error("illegal guest state transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: crate::manager::GuestState,
        to: crate::manager::GuestState,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{op}: {errno}")]
    Os { op: &'static str, errno: Errno },
}

impl Error {
    /// Maps an errno from an operation on `pid`, turning ESRCH into [`Error::ProcessGone`].
    pub(crate) fn os(pid: i32, op: &'static str, errno: Errno) -> Self {
        match errno {
            Errno::ESRCH => Error::ProcessGone(pid),
            errno => Error::Os { op, errno },
        }
    }

    pub(crate) fn io(pid: i32, err: io::Error) -> Self {
        match err.raw_os_error() {
            Some(libc::ESRCH) | Some(libc::ENOENT) => Error::ProcessGone(pid),
            _ => Error::Io(err),
        }
    }

    /// True for errors after which the guest cannot be trusted any more.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::GuestDiverged(_)
                | Error::SyscallFailed { .. }
                | Error::AddressCollision { .. }
                | Error::PartialTransfer { .. }
                | Error::ProcessGone(_)
                | Error::ContainerLost(_)
                | Error::Timeout(_)
        )
    }
}
