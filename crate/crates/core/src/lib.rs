//! Snapshot and rollback of a warm worker process between requests.
//!
//! A guest is started under ptrace, warmed up, and snapshotted. After each
//! request only the pages it wrote (and any mappings it changed) are put
//! back, so the next request sees exactly the post-warm-up state.

pub mod bench;
pub mod dirty;
pub mod error;
pub mod manager;
pub mod proc;
pub mod restore;
pub mod snapshot;

pub use dirty::{diff_layout, Backend, DirtySet, DirtyTracker, LayoutDelta};
pub use error::{Error, Result};
pub use restore::{restore, RestoreOptions, RestoreReport};
pub use snapshot::{take_snapshot, Snapshot, SnapshotPolicy};
