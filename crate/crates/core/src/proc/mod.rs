//! Kernel-facing view of a traced guest: layout, page flags, memory bytes,
//! threads and registers.

pub mod maps;
pub mod mem;
pub mod pagemap;
pub mod regs;
pub mod tracee;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

pub use maps::{MemoryLayout, MemoryRegion, Perms, RegionKind};
pub use pagemap::{PageFlags, PagemapReader};
pub use regs::{capture_thread_registers, set_thread_registers, ThreadRegisters};
pub use tracee::{list_threads, Tracee};

use crate::error::{Error, Result};

/// System page size, read once.
pub fn page_size() -> u64 {
    static PS: OnceLock<u64> = OnceLock::new();
    *PS.get_or_init(|| {
        // SAFETY: sysconf has no memory-safety preconditions.
        let ps = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if ps > 0 {
            ps as u64
        } else {
            4096
        }
    })
}

/// Reads and parses `/proc/<pid>/maps`. When the guest has no heap mapping
/// yet, `brk` is taken from the `start_brk` field of `/proc/<pid>/stat`.
pub fn read_memory_layout(pid: i32) -> Result<MemoryLayout> {
    let text = fs::read_to_string(format!("/proc/{pid}/maps")).map_err(|e| Error::io(pid, e))?;
    if text.is_empty() && !std::path::Path::new(&format!("/proc/{pid}/task")).exists() {
        return Err(Error::ProcessGone(pid));
    }
    let mut layout = MemoryLayout::parse(pid, &text)?;
    if layout.heap().is_none() {
        layout.brk = read_start_brk(pid)?;
    }
    Ok(layout)
}

fn read_start_brk(pid: i32) -> Result<u64> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat")).map_err(|e| Error::io(pid, e))?;
    // Fields after the parenthesised command name start at field 3.
    let tail = stat.rsplit_once(')').map(|(_, t)| t).unwrap_or("");
    tail.split_whitespace()
        .nth(47 - 3)
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::Parse(format!("/proc/{pid}/stat start_brk")))
}

/// Flags of every page in `region`, in address order.
pub fn read_page_flags(tracee: &mut Tracee, region: &MemoryRegion) -> Result<Vec<PageFlags>> {
    tracee.pagemap()?.read_flags(region.start, region.page_count())
}

pub fn read_memory(tracee: &mut Tracee, start: u64, len: usize) -> Result<Vec<u8>> {
    tracee.mem()?.read(start, len)
}

pub fn write_memory(tracee: &mut Tracee, start: u64, bytes: &[u8]) -> Result<()> {
    tracee.mem()?.write(start, bytes)
}

/// Open descriptors of `pid` as `fd -> link target`.
pub fn list_fds(pid: i32) -> Result<BTreeMap<i32, PathBuf>> {
    let dir = fs::read_dir(format!("/proc/{pid}/fd")).map_err(|e| Error::io(pid, e))?;
    let mut out = BTreeMap::new();
    for entry in dir.filter_map(|e| e.ok()) {
        let Some(fd) = entry.file_name().to_str().and_then(|s| s.parse().ok()) else {
            continue;
        };
        // A descriptor closed between readdir and readlink is simply skipped.
        if let Ok(target) = fs::read_link(entry.path()) {
            out.insert(fd, target);
        }
    }
    Ok(out)
}

/// Total huge-page backed memory of `pid` in kB (transparent and hugetlbfs).
pub fn huge_page_kb(pid: i32) -> Result<u64> {
    let text = fs::read_to_string(format!("/proc/{pid}/smaps_rollup")).map_err(|e| Error::io(pid, e))?;
    let mut total = 0;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        if matches!(
            key,
            "AnonHugePages" | "ShmemPmdMapped" | "FilePmdMapped" | "Shared_Hugetlb" | "Private_Hugetlb"
        ) {
            total += rest.split_whitespace().next().and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        }
    }
    Ok(total)
}

/// Resident set size of `pid` in kB.
pub fn resident_kb(pid: i32) -> Result<u64> {
    let text = fs::read_to_string(format!("/proc/{pid}/status")).map_err(|e| Error::io(pid, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))
        .and_then(|v| v.split_whitespace().next()?.parse().ok())
        .ok_or_else(|| Error::Parse(format!("/proc/{pid}/status VmRSS")))
}
