//! In-memory image of a stopped guest.

use std::time::{Duration, Instant, SystemTime};

use log::{debug, warn};

use crate::dirty::DirtyTracker;
use crate::error::{Error, Result};
use crate::proc::{
    capture_thread_registers, huge_page_kb, list_threads, page_size, read_memory_layout, MemoryLayout,
    MemoryRegion, ThreadRegisters, Tracee,
};
use crate::restore::inject::{inject_syscall, nr, SyscallRequest};

pub const DEFAULT_CAP_BYTES: u64 = 2 << 30;

/// Bytes of consecutive present pages, starting at page `first` of a region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageRun {
    pub first: u64,
    pub bytes: Vec<u8>,
}

impl PageRun {
    pub fn pages(&self) -> u64 {
        self.bytes.len() as u64 / page_size()
    }

    pub fn end(&self) -> u64 {
        self.first + self.pages()
    }
}

/// Captured contents of one region. Pages that were not present are
/// recorded as absent, not as zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionImage {
    pub region: MemoryRegion,
    pub runs: Vec<PageRun>,
}

impl RegionImage {
    fn run_index(&self, page: u64) -> Option<usize> {
        let i = self.runs.partition_point(|r| r.end() <= page);
        self.runs.get(i).filter(|r| r.first <= page).map(|_| i)
    }

    pub fn run_at(&self, page: u64) -> Option<&PageRun> {
        self.run_index(page).map(|i| &self.runs[i])
    }

    pub fn is_present(&self, page: u64) -> bool {
        self.run_index(page).is_some()
    }

    pub fn page(&self, page: u64) -> Option<&[u8]> {
        let ps = page_size() as usize;
        let run = &self.runs[self.run_index(page)?];
        let off = (page - run.first) as usize * ps;
        Some(&run.bytes[off..off + ps])
    }

    /// Bytes of `count` pages from `page` when they all lie in one run.
    pub fn span(&self, page: u64, count: u64) -> Option<&[u8]> {
        let ps = page_size() as usize;
        let run = &self.runs[self.run_index(page)?];
        if page + count > run.end() {
            return None;
        }
        let off = (page - run.first) as usize * ps;
        Some(&run.bytes[off..off + count as usize * ps])
    }

    pub fn present_pages(&self) -> u64 {
        self.runs.iter().map(|r| r.pages()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SnapshotPolicy {
    pub cap_bytes: u64,
    /// Exclude writable shared mappings with a warning instead of failing.
    pub allow_shared_writable: bool,
}

impl Default for SnapshotPolicy {
    fn default() -> Self {
        SnapshotPolicy { cap_bytes: DEFAULT_CAP_BYTES, allow_shared_writable: false }
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub layout: MemoryLayout,
    pub images: Vec<RegionImage>,
    /// Regions left out of capture and restore by policy.
    pub excluded: Vec<MemoryRegion>,
    pub threads: Vec<ThreadRegisters>,
    /// (tid, syscall number) of threads captured inside a restartable syscall.
    pub interrupted: Vec<(i32, u64)>,
    /// Heap end as seen in the layout.
    pub brk: u64,
    /// The kernel's exact program break, which may lie inside the last heap page.
    pub exact_brk: u64,
    pub epoch: u64,
    pub captured_at: SystemTime,
    pub capture_duration: Duration,
    pub byte_size: u64,
}

impl Snapshot {
    pub fn image_for(&self, start: u64) -> Option<&RegionImage> {
        let i = self.images.partition_point(|im| im.region.start < start);
        self.images.get(i).filter(|im| im.region.start == start)
    }

    pub fn present_pages(&self) -> u64 {
        self.images.iter().map(|i| i.present_pages()).sum()
    }

    /// Equality of captured state, ignoring timestamps and bookkeeping.
    pub fn same_state(&self, other: &Snapshot) -> bool {
        self.layout == other.layout
            && self.images == other.images
            && self.threads == other.threads
            && self.brk == other.brk
            && self.exact_brk == other.exact_brk
    }

    pub fn is_excluded(&self, region: &MemoryRegion) -> bool {
        self.excluded.iter().any(|e| e.start <= region.start && region.end <= e.end)
    }
}

/// Captures the stopped guest, then arms dirty tracking so that tracking
/// starts exactly at the snapshot point.
pub fn take_snapshot(tracee: &mut Tracee, tracker: &mut DirtyTracker, policy: &SnapshotPolicy) -> Result<Snapshot> {
    let started = Instant::now();
    let captured_at = SystemTime::now();
    let pid = tracee.pid();
    if !tracee.is_stopped() {
        return Err(Error::NotStopped(pid));
    }

    let tids = list_threads(pid)?;
    let threads = tids.iter().map(|&t| capture_thread_registers(t)).collect::<Result<Vec<_>>>()?;

    let interrupted: Vec<(i32, u64)> =
        threads.iter().filter_map(|t| t.interrupted_syscall().map(|nr| (t.tid, nr))).collect();
    if !interrupted.is_empty() {
        debug!("guest {pid}: threads inside restartable syscalls: {interrupted:?}");
    }

    let huge = huge_page_kb(pid)?;
    if huge > 0 {
        return Err(Error::HugePages(huge));
    }

    let layout = read_memory_layout(pid)?;
    let mut excluded = Vec::new();
    for r in layout.tracked().filter(|r| r.is_shared_writable()) {
        if !policy.allow_shared_writable {
            return Err(Error::SharedWritableMapping { start: r.start, end: r.end, what: format!("{:?}", r.kind) });
        }
        warn!("excluding writable shared mapping {r} from snapshot");
        excluded.push(r.clone());
    }

    // Presence first, so the cap is checked before copying anything.
    let ps = page_size();
    let mut present: Vec<(MemoryRegion, Vec<(u64, u64)>)> = Vec::new();
    let mut total_pages = 0u64;
    for r in layout.tracked().filter(|r| !excluded.contains(r)) {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        tracee.pagemap()?.for_each(r.start, r.page_count(), |i, f| {
            if f.populated() {
                match runs.last_mut() {
                    Some((_, end)) if *end == i => *end += 1,
                    _ => runs.push((i, i + 1)),
                }
            }
        })?;
        total_pages += runs.iter().map(|(a, b)| b - a).sum::<u64>();
        present.push((r.clone(), runs));
    }
    let byte_size = total_pages * ps;
    if byte_size > policy.cap_bytes {
        return Err(Error::OutOfMemory { needed: byte_size, cap: policy.cap_bytes });
    }

    let mut images = Vec::with_capacity(present.len());
    for (region, runs) in present {
        let mut out = Vec::with_capacity(runs.len());
        for (a, b) in runs {
            let bytes = tracee.mem()?.read(region.start + a * ps, ((b - a) * ps) as usize)?;
            out.push(PageRun { first: a, bytes });
        }
        images.push(RegionImage { region, runs: out });
    }

    let exact_brk = inject_syscall(tracee, pid, &SyscallRequest::new(nr::BRK, &[0]))?;
    tracker.arm(tracee, &layout)?;

    let snap = Snapshot {
        brk: layout.brk,
        layout,
        images,
        excluded,
        threads,
        interrupted,
        exact_brk,
        epoch: tracker.epoch(),
        captured_at,
        capture_duration: started.elapsed(),
        byte_size,
    };
    debug!(
        "snapshot of {pid}: {} regions, {} pages, {} threads in {:?}",
        snap.images.len(),
        total_pages,
        snap.threads.len(),
        snap.capture_duration
    );
    Ok(snap)
}

pub fn quiesce(tracee: &mut Tracee) -> Result<()> {
    tracee.quiesce().map_err(|e| match e {
        Error::Timeout(m) => Error::GuestDiverged(format!("quiesce: {m}")),
        e => e,
    })
}

pub fn resume(tracee: &mut Tracee) -> Result<()> {
    tracee.resume()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proc::{Perms, RegionKind};

    #[test]
    fn spans_stay_within_runs() {
        let ps = page_size();
        let region = MemoryRegion::new(0x10000, 0x10000 + 8 * ps, Perms::rw(), RegionKind::Anonymous);
        let img = RegionImage {
            region,
            runs: vec![
                PageRun { first: 1, bytes: vec![1; 2 * ps as usize] },
                PageRun { first: 5, bytes: vec![5; 3 * ps as usize] },
            ],
        };
        assert!(!img.is_present(0) && img.is_present(1) && img.is_present(2) && !img.is_present(3));
        assert_eq!(img.page(6).unwrap()[0], 5);
        assert!(img.span(1, 2).is_some());
        assert!(img.span(2, 2).is_none());
        assert_eq!(img.span(5, 3).unwrap().len(), 3 * ps as usize);
        assert_eq!(img.present_pages(), 5);
    }
}
