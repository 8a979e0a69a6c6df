//! Which pages did the guest write since the last reset, and how did its
//! address space change?
//!
//! Two kernel mechanisms can answer the first question:
//!
//! * soft-dirty bits (`clear_refs` value 4, pagemap bit 55), and
//! * asynchronous userfaultfd write-protection (`UFFD_FEATURE_WP_ASYNC`): the
//!   kernel drops the write-protect bit itself on the first write, nothing
//!   ever waits on the descriptor, and `PAGEMAP_SCAN` re-arms every page in
//!   one ioctl. A populated page without pagemap bit 57 was written.
//!
//! A host probe picks whichever works, soft-dirty first.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::sync::OnceLock;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::proc::{page_size, MemoryLayout, MemoryRegion, PageFlags, RegionKind, Tracee};
use crate::restore::inject::{inject_syscall, nr, SyscallRequest};

/// Page runs written since the last reset, grouped by the region that holds
/// them. Ranges are byte addresses, page aligned, sorted, disjoint and never
/// adjacent within a region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DirtySet {
    regions: BTreeMap<u64, Vec<Range<u64>>>,
    total_pages: u64,
}

impl DirtySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one page. Pages must arrive in ascending address order per region.
    pub fn push_page(&mut self, region_start: u64, addr: u64) {
        let ps = page_size();
        self.push_run(region_start, addr..addr + ps);
    }

    /// Adds a run of pages, merging with the previous run when adjacent.
    pub fn push_run(&mut self, region_start: u64, run: Range<u64>) {
        if run.is_empty() {
            return;
        }
        let ps = page_size();
        let runs = self.regions.entry(region_start).or_default();
        match runs.last_mut() {
            Some(last) if last.end >= run.start => {
                debug_assert!(last.start <= run.start, "runs must be pushed in order");
                if run.end > last.end {
                    self.total_pages += (run.end - last.end) / ps;
                    last.end = run.end;
                }
            }
            _ => {
                self.total_pages += (run.end - run.start) / ps;
                runs.push(run);
            }
        }
    }

    pub fn total_pages(&self) -> u64 {
        self.total_pages
    }

    pub fn is_empty(&self) -> bool {
        self.total_pages == 0
    }

    pub fn regions(&self) -> impl Iterator<Item = (u64, &[Range<u64>])> {
        self.regions.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn runs(&self) -> impl Iterator<Item = Range<u64>> + '_ {
        self.regions.values().flat_map(|v| v.iter().cloned())
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.regions.values().any(|runs| {
            let i = runs.partition_point(|r| r.end <= addr);
            runs.get(i).is_some_and(|r| r.start <= addr)
        })
    }

    /// Every page address, in order.
    pub fn pages(&self) -> impl Iterator<Item = u64> + '_ {
        let ps = page_size();
        self.runs().flat_map(move |r| (r.start..r.end).step_by(ps as usize))
    }
}

/// Structural difference between the snapshot layout and the current one.
///
/// Current regions are cut at snapshot region boundaries before comparison;
/// `resized` pairs a snapshot region with each current piece that overlaps
/// or extends it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayoutDelta {
    pub added: Vec<MemoryRegion>,
    pub removed: Vec<MemoryRegion>,
    pub resized: Vec<(MemoryRegion, MemoryRegion)>,
    pub reprotected: Vec<(MemoryRegion, MemoryRegion)>,
    pub brk_delta: i64,
    /// Pages present now but absent at snapshot time, in surviving regions.
    pub newly_paged: Vec<Range<u64>>,
}

impl LayoutDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty()
            && self.removed.is_empty()
            && self.resized.is_empty()
            && self.reprotected.is_empty()
            && self.brk_delta == 0
            && self.newly_paged.is_empty()
    }

    pub fn structural_changes(&self) -> usize {
        self.added.len() + self.removed.len() + self.resized.len() + self.reprotected.len()
    }
}

struct Piece {
    region: MemoryRegion,
    cur: usize,
    snap: Option<usize>,
}

fn split_at(cur: &[&MemoryRegion], cuts: &[u64]) -> Vec<(MemoryRegion, usize)> {
    let mut out = Vec::new();
    for (ci, c) in cur.iter().enumerate() {
        let mut at = c.start;
        let first = cuts.partition_point(|&x| x <= c.start);
        for &cut in cuts[first..].iter().take_while(|&&x| x < c.end).chain(std::iter::once(&c.end)) {
            out.push((c.slice(at..cut), ci));
            at = cut;
        }
    }
    out
}

fn cut_at_boundaries(snap: &[&MemoryRegion], cur: &[&MemoryRegion]) -> Vec<Piece> {
    let mut cuts: Vec<u64> = snap.iter().flat_map(|r| [r.start, r.end]).collect();
    cuts.sort_unstable();
    cuts.dedup();
    split_at(cur, &cuts)
        .into_iter()
        .map(|(region, cur)| {
            let si = snap.partition_point(|s| s.end <= region.start);
            let snap_idx = snap.get(si).filter(|s| s.start <= region.start && region.end <= s.end).map(|_| si);
            Piece { region, cur, snap: snap_idx }
        })
        .collect()
}

/// Computes the structural delta from `snapshot` to `current` (kernel-owned
/// regions are ignored). `newly_paged` is left empty; it needs page flags.
pub fn diff_layout(snapshot: &MemoryLayout, current: &MemoryLayout) -> LayoutDelta {
    let snap: Vec<&MemoryRegion> = snapshot.tracked().collect();
    let cur: Vec<&MemoryRegion> = current.tracked().collect();
    let pieces = cut_at_boundaries(&snap, &cur);

    // A piece outside every snapshot region that belongs to the same current
    // region as a surviving piece is growth of that snapshot region.
    let mut growth_of: Vec<Option<usize>> = vec![None; pieces.len()];
    for (i, p) in pieces.iter().enumerate() {
        if p.snap.is_some() {
            continue;
        }
        let neighbour = [i.checked_sub(1), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter_map(|j| pieces.get(j))
            .find(|q| q.cur == p.cur && q.snap.is_some());
        growth_of[i] = neighbour.and_then(|q| q.snap);
    }

    let mut delta = LayoutDelta {
        brk_delta: current.brk as i64 - snapshot.brk as i64,
        ..LayoutDelta::default()
    };
    for (si, s) in snap.iter().enumerate() {
        let inside: Vec<&Piece> = pieces.iter().filter(|p| p.snap == Some(si)).collect();
        let grown: Vec<&Piece> =
            pieces.iter().zip(&growth_of).filter(|(_, g)| **g == Some(si)).map(|(p, _)| p).collect();
        if inside.is_empty() {
            delta.removed.push((*s).clone());
            continue;
        }
        if inside.len() == 1 && grown.is_empty() {
            let p = &inside[0].region;
            if p.range() == s.range() && p.same_backing(s) {
                if p.perms != s.perms {
                    delta.reprotected.push(((*s).clone(), p.clone()));
                }
                continue;
            }
        }
        let mut all: Vec<&Piece> = inside.into_iter().chain(grown).collect();
        all.sort_by_key(|p| p.region.start);
        for p in all {
            delta.resized.push(((*s).clone(), p.region.clone()));
        }
    }

    let mut added: Vec<MemoryRegion> = Vec::new();
    let mut last_cur = usize::MAX;
    for (p, g) in pieces.iter().zip(&growth_of) {
        if p.snap.is_some() || g.is_some() {
            continue;
        }
        match added.last_mut() {
            Some(prev) if last_cur == p.cur && prev.end == p.region.start => prev.end = p.region.end,
            _ => added.push(p.region.clone()),
        }
        last_cur = p.cur;
    }
    delta.added = added;
    delta
}

/// Applies the inverse of `delta` to `current`, which must be the layout the
/// delta was computed against. The result equals the snapshot layout.
pub fn apply_inverse(current: &MemoryLayout, delta: &LayoutDelta) -> MemoryLayout {
    let snap_side: Vec<&MemoryRegion> = delta
        .removed
        .iter()
        .chain(delta.resized.iter().map(|(s, _)| s))
        .chain(delta.reprotected.iter().map(|(s, _)| s))
        .collect();
    let cur_side: Vec<Range<u64>> = delta
        .added
        .iter()
        .map(|r| r.range())
        .chain(delta.resized.iter().map(|(_, c)| c.range()))
        .chain(delta.reprotected.iter().map(|(_, c)| c.range()))
        .collect();
    let touched = |r: &MemoryRegion| cur_side.iter().any(|c| c.start <= r.start && r.end <= c.end);
    let mut cuts: Vec<u64> = snap_side
        .iter()
        .flat_map(|r| [r.start, r.end])
        .chain(cur_side.iter().flat_map(|c| [c.start, c.end]))
        .collect();
    cuts.sort_unstable();
    cuts.dedup();

    let tracked: Vec<&MemoryRegion> = current.tracked().collect();
    let mut regions: Vec<MemoryRegion> = current.regions.iter().filter(|r| r.is_kernel_owned()).cloned().collect();
    for (piece, _) in split_at(&tracked, &cuts) {
        if !touched(&piece) {
            regions.push(piece);
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in snap_side {
        if seen.insert(s.start) {
            regions.push(s.clone());
        }
    }
    let mut out = MemoryLayout {
        pid: current.pid,
        regions,
        brk: (current.brk as i64 - delta.brk_delta) as u64,
    };
    out.canonicalize();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    SoftDirty,
    UffdWriteProtect,
}

impl Backend {
    /// Whether a page with these flags counts as written since the last reset.
    pub fn is_dirty(self, flags: &PageFlags) -> bool {
        match self {
            Backend::SoftDirty => flags.populated() && flags.soft_dirty,
            Backend::UffdWriteProtect => flags.populated() && !flags.uffd_wp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::SoftDirty => "soft-dirty",
            Backend::UffdWriteProtect => "uffd-wp",
        }
    }

    /// The first backend that works on this host. Probed once per process;
    /// `REWIND_DIRTY_BACKEND` (`soft-dirty` or `uffd-wp`) forces a choice.
    pub fn detect() -> Result<Backend> {
        static PROBED: OnceLock<std::result::Result<Backend, String>> = OnceLock::new();
        PROBED
            .get_or_init(|| {
                let forced = std::env::var("REWIND_DIRTY_BACKEND").ok();
                let sd = || probe_soft_dirty().map(|_| Backend::SoftDirty);
                let wp = || probe_uffd_wp().map(|_| Backend::UffdWriteProtect);
                let r = match forced.as_deref() {
                    Some("soft-dirty") => sd(),
                    Some("uffd-wp") => wp(),
                    _ => sd().or_else(|e1| wp().map_err(|e2| format!("soft-dirty: {e1}; uffd-wp: {e2}"))),
                };
                if let Ok(b) = &r {
                    debug!("dirty tracking backend: {}", b.name());
                }
                r
            })
            .clone()
            .map_err(Error::KernelUnsupported)
    }
}

// userfaultfd and PAGEMAP_SCAN ABI (include/uapi/linux/{userfaultfd,fs}.h)
const UFFD_USER_MODE_ONLY: u64 = 1;
const UFFD_API: u64 = 0xaa;
const UFFD_FEATURE_WP_UNPOPULATED: u64 = 1 << 13;
const UFFD_FEATURE_WP_ASYNC: u64 = 1 << 15;
const UFFDIO_REGISTER_MODE_WP: u64 = 1 << 1;
const UFFDIO_API: libc::c_ulong = 0xc018_aa3f;
const UFFDIO_REGISTER: libc::c_ulong = 0xc020_aa00;
const PAGEMAP_SCAN: libc::c_ulong = 0xc060_6610;
const PM_SCAN_WP_MATCHING: u64 = 1;
const PAGE_IS_WRITTEN: u64 = 1 << 1;

#[repr(C)]
#[derive(Default)]
struct UffdioApi {
    api: u64,
    features: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioRegister {
    start: u64,
    len: u64,
    mode: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default)]
struct PmScanArg {
    size: u64,
    flags: u64,
    start: u64,
    end: u64,
    walk_end: u64,
    vec: u64,
    vec_len: u64,
    max_pages: u64,
    category_inverted: u64,
    category_mask: u64,
    category_anyof_mask: u64,
    return_mask: u64,
}

fn ioctl<T>(fd: RawFd, req: libc::c_ulong, arg: &mut T) -> std::io::Result<()> {
    // SAFETY: `arg` is a live, correctly sized #[repr(C)] struct for `req`.
    let r = unsafe { libc::ioctl(fd, req, arg as *mut T) };
    if r < 0 {
        Err(std::io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn uffd_api(fd: RawFd) -> std::io::Result<()> {
    let want = UFFD_FEATURE_WP_ASYNC | UFFD_FEATURE_WP_UNPOPULATED;
    let mut api = UffdioApi { api: UFFD_API, features: want, ioctls: 0 };
    ioctl(fd, UFFDIO_API, &mut api)?;
    if api.features & want != want {
        return Err(std::io::Error::from_raw_os_error(libc::EOPNOTSUPP));
    }
    Ok(())
}

fn uffd_register(fd: RawFd, range: Range<u64>) -> std::io::Result<()> {
    let mut reg = UffdioRegister {
        start: range.start,
        len: range.end - range.start,
        mode: UFFDIO_REGISTER_MODE_WP,
        ioctls: 0,
    };
    ioctl(fd, UFFDIO_REGISTER, &mut reg)
}

/// Write-protects every page in `range` of the process owning `pagemap`.
/// VMAs not registered for async write-protection are skipped by the kernel.
fn pagemap_wp(pagemap: RawFd, range: Range<u64>) -> std::io::Result<()> {
    let mut start = range.start;
    while start < range.end {
        let mut arg = PmScanArg {
            size: std::mem::size_of::<PmScanArg>() as u64,
            flags: PM_SCAN_WP_MATCHING,
            start,
            end: range.end,
            category_mask: PAGE_IS_WRITTEN,
            return_mask: PAGE_IS_WRITTEN,
            ..Default::default()
        };
        ioctl(pagemap, PAGEMAP_SCAN, &mut arg)?;
        if arg.walk_end <= start {
            break;
        }
        start = arg.walk_end;
    }
    Ok(())
}

fn anon_page() -> std::io::Result<(*mut u8, usize)> {
    let ps = page_size() as usize;
    // SAFETY: fresh private anonymous mapping, released by the caller.
    let p = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            ps,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        return Err(std::io::Error::last_os_error());
    }
    Ok((p as *mut u8, ps))
}

fn self_flags(addr: u64) -> std::result::Result<PageFlags, String> {
    let mut r = crate::proc::PagemapReader::open(std::process::id() as i32).map_err(|e| e.to_string())?;
    r.read_flags(addr, 1).map(|v| v[0]).map_err(|e| e.to_string())
}

fn probe_soft_dirty() -> std::result::Result<(), String> {
    let (p, len) = anon_page().map_err(|e| e.to_string())?;
    let result = (|| {
        // SAFETY: p is a valid writable page we own.
        unsafe { std::ptr::write_volatile(p, 1) };
        let mut f = OpenOptions::new().write(true).open("/proc/self/clear_refs").map_err(|e| e.to_string())?;
        f.write_all(b"4").map_err(|e| e.to_string())?;
        if self_flags(p as u64)?.soft_dirty {
            return Err("soft-dirty bit not cleared by clear_refs".into());
        }
        // SAFETY: as above.
        unsafe { std::ptr::write_volatile(p, 2) };
        if !self_flags(p as u64)?.soft_dirty {
            return Err("soft-dirty bit not set by a write".into());
        }
        Ok(())
    })();
    // SAFETY: unmapping the page mapped above.
    unsafe { libc::munmap(p as *mut libc::c_void, len) };
    result
}

fn probe_uffd_wp() -> std::result::Result<(), String> {
    // SAFETY: plain syscall; the returned descriptor is owned below.
    let fd = unsafe {
        libc::syscall(libc::SYS_userfaultfd, libc::O_CLOEXEC as u64 | libc::O_NONBLOCK as u64 | UFFD_USER_MODE_ONLY)
    };
    if fd < 0 {
        return Err(format!("userfaultfd: {}", std::io::Error::last_os_error()));
    }
    // SAFETY: fd was just returned by the kernel and is not owned elsewhere.
    let uffd = unsafe { OwnedFd::from_raw_fd(fd as RawFd) };
    uffd_api(uffd.as_raw_fd()).map_err(|e| format!("UFFDIO_API: {e}"))?;
    let (p, len) = anon_page().map_err(|e| e.to_string())?;
    let result = (|| {
        let addr = p as u64;
        // SAFETY: p is a valid writable page we own.
        unsafe { std::ptr::write_volatile(p, 1) };
        uffd_register(uffd.as_raw_fd(), addr..addr + len as u64).map_err(|e| format!("UFFDIO_REGISTER: {e}"))?;
        let pm = std::fs::File::open("/proc/self/pagemap").map_err(|e| e.to_string())?;
        pagemap_wp(pm.as_raw_fd(), addr..addr + len as u64).map_err(|e| format!("PAGEMAP_SCAN: {e}"))?;
        if !self_flags(addr)?.uffd_wp {
            return Err("page not write-protected after PAGEMAP_SCAN".into());
        }
        // SAFETY: as above; the async fault is resolved by the kernel.
        unsafe { std::ptr::write_volatile(p, 2) };
        if self_flags(addr)?.uffd_wp {
            return Err("write did not clear the write-protect bit".into());
        }
        Ok(())
    })();
    // SAFETY: unmapping the page mapped above.
    unsafe { libc::munmap(p as *mut libc::c_void, len) };
    result
}

/// Dirty-page tracking for one guest.
#[derive(Debug)]
pub struct DirtyTracker {
    backend: Backend,
    epoch: u64,
    uffd: Option<OwnedFd>,
}

impl DirtyTracker {
    pub fn new() -> Result<Self> {
        Ok(Self::with_backend(Backend::detect()?))
    }

    pub fn with_backend(backend: Backend) -> Self {
        DirtyTracker { backend, epoch: 0, uffd: None }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Number of resets performed so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Prepares tracking for every region of `layout` and resets. The guest
    /// must be quiesced.
    pub fn arm(&mut self, tracee: &mut Tracee, layout: &MemoryLayout) -> Result<()> {
        if self.backend == Backend::UffdWriteProtect && self.uffd.is_none() {
            self.uffd = Some(adopt_guest_uffd(tracee)?);
            for r in layout.tracked() {
                self.register(r)?;
            }
        }
        self.reset(tracee, layout)
    }

    /// Enables tracking on a region created after [`DirtyTracker::arm`].
    pub fn register(&mut self, region: &MemoryRegion) -> Result<()> {
        let Some(uffd) = &self.uffd else { return Ok(()) };
        if region.is_kernel_owned() {
            return Ok(());
        }
        if let Err(e) = uffd_register(uffd.as_raw_fd(), region.range()) {
            // Unregistered pages never carry the write-protect bit, so they
            // are reported dirty on every scan: slower, never wrong.
            warn!("cannot write-protect {region}: {e}; its pages will always be restored");
        }
        Ok(())
    }

    /// Registers every tracked region again, then resets. Mappings that the
    /// guest replaced in place lose their registration without changing the
    /// layout, so this is done after every restore.
    pub fn rearm(&mut self, tracee: &mut Tracee, layout: &MemoryLayout) -> Result<()> {
        if self.uffd.is_some() {
            for r in layout.tracked() {
                self.register(r)?;
            }
        }
        self.reset(tracee, layout)
    }

    /// Clears the written state of every page. Called with the guest quiesced.
    pub fn reset(&mut self, tracee: &mut Tracee, layout: &MemoryLayout) -> Result<()> {
        let pid = tracee.pid();
        match self.backend {
            Backend::SoftDirty => {
                let mut f = OpenOptions::new()
                    .write(true)
                    .open(format!("/proc/{pid}/clear_refs"))
                    .map_err(|e| Error::io(pid, e))?;
                f.write_all(b"4").map_err(|e| Error::io(pid, e))?;
            }
            Backend::UffdWriteProtect => {
                let mut tracked = layout.tracked();
                let Some(first) = tracked.next() else { return Ok(()) };
                let end = tracked.last().map_or(first.end, |r| r.end);
                let fd = tracee.pagemap()?.file().as_raw_fd();
                pagemap_wp(fd, first.start..end).map_err(|e| Error::io(pid, e))?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Pages written since the last reset, across every tracked region.
    pub fn scan(&self, tracee: &mut Tracee, layout: &MemoryLayout) -> Result<DirtySet> {
        let mut set = DirtySet::new();
        let ps = page_size();
        let backend = self.backend;
        for r in layout.tracked() {
            let start = r.start;
            tracee.pagemap()?.for_each(r.start, r.page_count(), |i, f| {
                if backend.is_dirty(&f) {
                    set.push_page(start, start + i * ps);
                }
            })?;
        }
        Ok(set)
    }
}

/// Creates a userfaultfd inside the guest, copies it into this process and
/// closes the guest's descriptor again.
fn adopt_guest_uffd(tracee: &mut Tracee) -> Result<OwnedFd> {
    let pid = tracee.pid();
    let tid = pid;
    let flags = libc::O_CLOEXEC as u64 | libc::O_NONBLOCK as u64 | UFFD_USER_MODE_ONLY;
    let guest_fd = inject_syscall(tracee, tid, &SyscallRequest::new(nr::USERFAULTFD, &[flags]))?;
    let local = pidfd_getfd(pid, guest_fd as RawFd);
    inject_syscall(tracee, tid, &SyscallRequest::new(nr::CLOSE, &[guest_fd]))?;
    let local = local?;
    uffd_api(local.as_raw_fd()).map_err(|e| Error::KernelUnsupported(format!("UFFDIO_API: {e}")))?;
    debug!("guest {pid}: adopted userfaultfd {guest_fd}");
    Ok(local)
}

fn pidfd_getfd(pid: i32, fd: RawFd) -> Result<OwnedFd> {
    // SAFETY: plain syscalls; returned descriptors are wrapped immediately.
    let pidfd = unsafe { libc::syscall(libc::SYS_pidfd_open, pid, 0) };
    if pidfd < 0 {
        return Err(Error::io(pid, std::io::Error::last_os_error()));
    }
    // SAFETY: as above.
    let pidfd = unsafe { OwnedFd::from_raw_fd(pidfd as RawFd) };
    // SAFETY: as above.
    let local = unsafe { libc::syscall(libc::SYS_pidfd_getfd, pidfd.as_raw_fd(), fd, 0) };
    if local < 0 {
        return Err(Error::io(pid, std::io::Error::last_os_error()));
    }
    // SAFETY: fresh descriptor owned by nobody else.
    Ok(unsafe { OwnedFd::from_raw_fd(local as RawFd) })
}

/// Convenience wrapper over [`DirtyTracker::scan`] with the current layout.
pub fn scan_dirty_pages(tracker: &DirtyTracker, tracee: &mut Tracee) -> Result<DirtySet> {
    let layout = crate::proc::read_memory_layout(tracee.pid())?;
    tracker.scan(tracee, &layout)
}

/// Regions that hold heap or stack, which restore treats specially.
pub fn is_growable(region: &MemoryRegion) -> bool {
    matches!(region.kind, RegionKind::Heap | RegionKind::Stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proc::Perms;
    use proptest::prelude::*;

    const PS: u64 = 4096;

    fn anon(start: u64, pages: u64, perms: Perms) -> MemoryRegion {
        MemoryRegion::new(start * PS, (start + pages) * PS, perms, RegionKind::Anonymous)
    }

    fn layout(regions: Vec<MemoryRegion>, brk: u64) -> MemoryLayout {
        let mut l = MemoryLayout { pid: 1, regions, brk };
        l.canonicalize();
        l
    }

    #[test]
    fn dirty_set_coalesces() {
        let mut s = DirtySet::new();
        for p in [1, 2, 3, 5, 6, 9] {
            s.push_page(0, p * PS);
        }
        s.push_page(100 * PS, 100 * PS);
        assert_eq!(s.total_pages(), 7);
        let runs: Vec<_> = s.runs().collect();
        assert_eq!(runs, vec![PS..4 * PS, 5 * PS..7 * PS, 9 * PS..10 * PS, 100 * PS..101 * PS]);
        assert!(s.contains(2 * PS + 7) && !s.contains(4 * PS));
    }

    #[test]
    fn identical_layouts_have_empty_delta() {
        let a = layout(vec![anon(16, 4, Perms::rw()), anon(32, 2, Perms::default())], 0);
        assert!(diff_layout(&a, &a).is_empty());
    }

    #[test]
    fn classifies_changes() {
        let ro = Perms { read: true, ..Perms::default() };
        let snap = layout(vec![anon(16, 4, Perms::rw()), anon(32, 2, Perms::rw()), anon(48, 2, Perms::rw())], 0);
        let cur = layout(
            vec![
                anon(16, 6, Perms::rw()), // grown by two pages
                anon(32, 2, ro),          // reprotected
                anon(64, 1, Perms::rw()), // added; region at 48 removed
            ],
            0,
        );
        let d = diff_layout(&snap, &cur);
        assert_eq!(d.added, vec![anon(64, 1, Perms::rw())]);
        assert_eq!(d.removed, vec![anon(48, 2, Perms::rw())]);
        assert_eq!(d.reprotected.len(), 1);
        assert_eq!(d.resized.len(), 2);
        assert_eq!(apply_inverse(&cur, &d), snap);
    }

    fn arb_layout() -> impl Strategy<Value = MemoryLayout> {
        let perms = prop_oneof![
            Just(Perms::rw()),
            Just(Perms { read: true, ..Perms::default() }),
            Just(Perms::default()),
        ];
        let file = prop_oneof![Just(None), Just(Some("/a")), Just(Some("/b"))];
        prop::collection::vec((0u64..3, 1u64..5, perms, file), 0..8).prop_map(|spec| {
            let mut at = 16;
            let mut regions = Vec::new();
            for (gap, pages, perms, file) in spec {
                at += gap;
                let kind = match file {
                    None => RegionKind::Anonymous,
                    Some(p) => RegionKind::File { path: p.into(), offset: at * PS },
                };
                regions.push(MemoryRegion::new(at * PS, (at + pages) * PS, perms, kind));
                at += pages;
            }
            layout(regions, 0)
        })
    }

    proptest! {
        #[test]
        fn inverse_of_delta_recovers_snapshot(a in arb_layout(), b in arb_layout(), brk_a in 0u64..8, brk_b in 0u64..8) {
            let mut a = a;
            let mut b = b;
            a.brk = brk_a * PS;
            b.brk = brk_b * PS;
            let d = diff_layout(&a, &b);
            prop_assert_eq!(apply_inverse(&b, &d), a.clone());
            prop_assert_eq!(d.is_empty(), a == b);
        }

        #[test]
        fn dirty_set_is_disjoint_and_counted(mut pages in prop::collection::vec(0u64..512, 0..200)) {
            pages.sort_unstable();
            pages.dedup();
            let mut s = DirtySet::new();
            for &p in &pages {
                s.push_page(if p < 256 { 0 } else { 256 * PS }, p * PS);
            }
            prop_assert_eq!(s.total_pages(), pages.len() as u64);
            for (_, runs) in s.regions() {
                for w in runs.windows(2) {
                    prop_assert!(w[0].end < w[1].start);
                }
            }
            let back: Vec<u64> = s.pages().map(|a| a / PS).collect();
            prop_assert_eq!(back, pages);
        }
    }
}
