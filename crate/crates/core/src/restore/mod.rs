//! Returning a stopped guest to its snapshot.
//!
//! The sequence is: brk, unmap added regions, map removed regions, fix
//! permissions, zero the stack, rewrite dirty pages, restore registers,
//! drop newly paged pages, reset tracking.

pub mod inject;
pub mod report;

use std::ops::Range;

use log::{debug, trace};

use crate::dirty::{diff_layout, Backend, DirtySet, DirtyTracker, LayoutDelta};
use crate::error::{Error, Result};
use crate::proc::{
    list_threads, page_size, read_memory_layout, set_thread_registers, MemoryLayout, MemoryRegion, Perms,
    RegionKind, Tracee,
};
use crate::snapshot::{quiesce, Snapshot};
use inject::{inject_syscall, nr, with_stack_scratch, Expect, SyscallRequest};
pub use report::{RestoreReport, Step, StepTimer};

/// Where `madvise` of newly paged pages sits relative to register restore.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RestoreOrder {
    #[default]
    RegistersFirst,
    MadviseFirst,
}

#[derive(Clone, Debug, Default)]
pub struct RestoreOptions {
    /// Zero every present stack page instead of only dirty or new ones.
    pub zero_full_stack: bool,
    pub order: RestoreOrder,
    /// Resume the guest at the end and charge it to the detaching step.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayoutOp {
    Unmap(Range<u64>),
    Map(MemoryRegion),
    Protect(Range<u64>, Perms),
}

/// Syscalls that turn the current layout back into the snapshot layout.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayoutPlan {
    /// Target program break when the heap end moved.
    pub brk: Option<u64>,
    pub ops: Vec<LayoutOp>,
}

impl LayoutPlan {
    pub fn is_empty(&self) -> bool {
        self.brk.is_none() && self.ops.is_empty()
    }
}

fn covering<'a>(regions: &[&'a MemoryRegion], addr: u64) -> Option<&'a MemoryRegion> {
    let i = regions.partition_point(|r| r.end <= addr);
    regions.get(i).copied().filter(|r| r.contains(addr))
}

/// Compares the two layouts over elementary intervals (between any two
/// consecutive region boundaries of either side). Heap growth and shrinkage
/// is left to `brk`.
pub fn plan_layout(snapshot: &Snapshot, current: &MemoryLayout) -> LayoutPlan {
    let snap: Vec<&MemoryRegion> = snapshot.layout.tracked().collect();
    let cur: Vec<&MemoryRegion> = current.tracked().collect();
    let mut cuts: Vec<u64> = snap.iter().chain(cur.iter()).flat_map(|r| [r.start, r.end]).collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut ops: Vec<LayoutOp> = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let op = match (covering(&snap, a), covering(&cur, a)) {
            (None, None) => None,
            (None, Some(c)) if c.kind == RegionKind::Heap => None,
            (None, Some(_)) => Some(LayoutOp::Unmap(a..b)),
            (Some(s), None) if s.kind == RegionKind::Heap => None,
            (Some(s), None) => Some(LayoutOp::Map(s.slice(a..b))),
            (Some(s), Some(c)) if s.kind == RegionKind::Heap && c.kind != RegionKind::Heap => {
                Some(LayoutOp::Unmap(a..b))
            }
            (Some(s), Some(c)) if !s.same_backing(c) => Some(LayoutOp::Map(s.slice(a..b))),
            (Some(s), Some(c)) if s.perms != c.perms => Some(LayoutOp::Protect(a..b, s.perms)),
            _ => None,
        };
        let Some(op) = op else { continue };
        match (ops.last_mut(), &op) {
            (Some(LayoutOp::Unmap(r)), LayoutOp::Unmap(n)) if r.end == n.start => r.end = n.end,
            (Some(LayoutOp::Map(r)), LayoutOp::Map(n))
                if r.end == n.start && r.perms == n.perms && r.same_backing(n) =>
            {
                r.end = n.end
            }
            (Some(LayoutOp::Protect(r, p)), LayoutOp::Protect(n, q)) if r.end == n.start && p == q => {
                r.end = n.end
            }
            _ => ops.push(op),
        }
    }
    let brk = (current.brk != snapshot.brk).then_some(snapshot.exact_brk);
    LayoutPlan { brk, ops }
}

/// Page work derived from the tracker and the snapshot's presence map.
#[derive(Clone, Debug, Default)]
pub struct PagePlan {
    /// `(image index, first page, page count)` to copy back from the snapshot.
    pub writes: Vec<(usize, u64, u64)>,
    pub zeros: Vec<Range<u64>>,
    pub advise: Vec<Range<u64>>,
    pub dirty: DirtySet,
    pub pages_scanned: u64,
}

impl PagePlan {
    pub fn pages_to_write(&self) -> u64 {
        self.writes.iter().map(|w| w.2).sum()
    }

    fn push_write(&mut self, img: usize, page: u64, count: u64) {
        match self.writes.last_mut() {
            Some(w) if w.0 == img && w.1 + w.2 == page => w.2 += count,
            _ => self.writes.push((img, page, count)),
        }
    }
}

fn push_addr(v: &mut Vec<Range<u64>>, addr: u64, len: u64) {
    match v.last_mut() {
        Some(r) if r.end == addr => r.end += len,
        _ => v.push(addr..addr + len),
    }
}

/// Classifies every page of every snapshot region.
///
/// Where the current mapping still has the snapshot's backing, a page is
/// rewritten if it was present at snapshot time and is now dirty or gone.
/// Elsewhere the mapping will be recreated, so every page that was present
/// is rewritten.
pub fn plan_pages(
    tracee: &mut Tracee,
    snapshot: &Snapshot,
    current: &MemoryLayout,
    backend: Backend,
    zero_full_stack: bool,
) -> Result<PagePlan> {
    let ps = page_size();
    let mut plan = PagePlan::default();
    let cur: Vec<&MemoryRegion> = current.tracked().collect();
    for (idx, image) in snapshot.images.iter().enumerate() {
        let s = &image.region;
        let is_stack = s.kind == RegionKind::Stack;
        let mut at = s.start;
        let mut i = cur.partition_point(|c| c.end <= s.start);
        let mut survivors: Vec<Range<u64>> = Vec::new();
        while i < cur.len() && cur[i].start < s.end {
            let c = cur[i];
            if s.same_backing(c) {
                survivors.push(c.start.max(s.start)..c.end.min(s.end));
            }
            i += 1;
        }
        for surv in survivors.iter().cloned().chain(std::iter::once(s.end..s.end)) {
            // Gap before this survivor: recreated, so rewrite everything.
            if at < surv.start {
                let (first, end) = ((at - s.start) / ps, (surv.start - s.start) / ps);
                for run in &image.runs {
                    let (a, b) = (run.first.max(first), run.end().min(end));
                    if a < b {
                        plan.push_write(idx, a, b - a);
                    }
                }
            }
            if surv.is_empty() {
                continue;
            }
            let base = (surv.start - s.start) / ps;
            let n = (surv.end - surv.start) / ps;
            let runs = &image.runs;
            let mut cursor = runs.partition_point(|r| r.end() <= base);
            let mut writes: Vec<(u64, u64)> = Vec::new();
            let (mut zeros, mut advise, mut dirty) = (Vec::new(), Vec::new(), Vec::new());
            tracee.pagemap()?.for_each(surv.start, n, |k, f| {
                let p = base + k;
                while cursor < runs.len() && runs[cursor].end() <= p {
                    cursor += 1;
                }
                let was = cursor < runs.len() && runs[cursor].first <= p;
                let now = f.populated();
                let written = backend.is_dirty(&f);
                let addr = s.start + p * ps;
                if written {
                    dirty.push(addr);
                }
                if is_stack && ((written && was) || (now && !was) || (zero_full_stack && now)) {
                    push_addr(&mut zeros, addr, ps);
                }
                if was && (written || !now || (is_stack && zero_full_stack)) {
                    match writes.last_mut() {
                        Some((a, c)) if *a + *c == p => *c += 1,
                        _ => writes.push((p, 1)),
                    }
                }
                if !was && now {
                    push_addr(&mut advise, addr, ps);
                }
            })?;
            plan.pages_scanned += n;
            for (p, c) in writes {
                plan.push_write(idx, p, c);
            }
            for z in zeros {
                push_addr(&mut plan.zeros, z.start, z.end - z.start);
            }
            for a in advise {
                push_addr(&mut plan.advise, a.start, a.end - a.start);
            }
            for d in dirty {
                plan.dirty.push_page(s.start, d);
            }
            at = surv.end;
        }
    }
    Ok(plan)
}

struct Injector<'a> {
    tracee: &'a mut Tracee,
    tid: i32,
    count: u64,
}

impl Injector<'_> {
    fn call(&mut self, req: SyscallRequest) -> Result<u64> {
        self.count += 1;
        trace!("inject {}({:#x?})", req.name(), &req.args[..3]);
        inject_syscall(self.tracee, self.tid, &req)
    }

    fn map(&mut self, r: &MemoryRegion) -> Result<()> {
        let prot = r.perms.prot() as u64;
        let share = if r.perms.shared { libc::MAP_SHARED } else { libc::MAP_PRIVATE };
        let got = match &r.kind {
            RegionKind::File { path, offset } => {
                let mut cpath = path.as_os_str().as_encoded_bytes().to_vec();
                cpath.push(0);
                let oflags = if r.perms.shared && r.perms.write { libc::O_RDWR } else { libc::O_RDONLY };
                let tid = self.tid;
                let fd = with_stack_scratch(self.tracee, tid, &cpath, |t, addr| {
                    inject_syscall(
                        t,
                        tid,
                        &SyscallRequest::new(
                            nr::OPENAT,
                            &[libc::AT_FDCWD as u64, addr, (oflags | libc::O_CLOEXEC) as u64],
                        ),
                    )
                })?;
                self.count += 1;
                let flags = (share | libc::MAP_FIXED) as u64;
                let got = self.call(
                    SyscallRequest::new(nr::MMAP, &[r.start, r.len(), prot, flags, fd, *offset]).expect(Expect::Any),
                );
                self.call(SyscallRequest::new(nr::CLOSE, &[fd]))?;
                got?
            }
            _ => {
                let flags = (share | libc::MAP_ANONYMOUS | libc::MAP_FIXED) as u64;
                self.call(
                    SyscallRequest::new(nr::MMAP, &[r.start, r.len(), prot, flags, u64::MAX, 0]).expect(Expect::Any),
                )?
            }
        };
        if inject::is_errno(got) {
            return Err(Error::SyscallFailed { name: "mmap", ret: got });
        }
        if got != r.start {
            return Err(Error::AddressCollision { expected: r.start, got });
        }
        Ok(())
    }
}

fn apply_layout(
    inj: &mut Injector<'_>,
    snapshot: &Snapshot,
    plan: &LayoutPlan,
    verify_brk: bool,
    timer: &mut StepTimer,
) -> Result<()> {
    let brk_target = plan.brk.or(verify_brk.then_some(snapshot.exact_brk));
    let mut brk_pending = false;
    if let Some(target) = brk_target {
        if verify_brk && plan.brk.is_none() {
            let now = inj.call(SyscallRequest::new(nr::BRK, &[0]))?;
            if now != target {
                debug!("program break drifted within the last heap page: {now:#x} != {target:#x}");
                brk_pending = inj.call(SyscallRequest::new(nr::BRK, &[target]).expect(Expect::Any))? != target;
            }
        } else {
            brk_pending = inj.call(SyscallRequest::new(nr::BRK, &[target]).expect(Expect::Any))? != target;
        }
    }
    timer.lap(Step::SyscallBrk);

    for op in &plan.ops {
        if let LayoutOp::Unmap(r) = op {
            inj.call(SyscallRequest::new(nr::MUNMAP, &[r.start, r.end - r.start]))?;
        }
    }
    timer.lap(Step::SyscallMunmap);

    if brk_pending {
        // The heap could not grow back while something sat in its way.
        inj.call(SyscallRequest::new(nr::BRK, &[snapshot.exact_brk]).expect(Expect::Equals(snapshot.exact_brk)))
            .map_err(|e| Error::GuestDiverged(format!("cannot restore program break: {e}")))?;
        timer.lap(Step::SyscallBrk);
    }

    for op in &plan.ops {
        if let LayoutOp::Map(r) = op {
            inj.map(r)?;
        }
    }
    timer.lap(Step::SyscallMmap);

    for op in &plan.ops {
        if let LayoutOp::Protect(r, perms) = op {
            inj.call(SyscallRequest::new(nr::MPROTECT, &[r.start, r.end - r.start, perms.prot() as u64]))?;
        }
    }
    timer.lap(Step::SyscallMprotect);
    Ok(())
}

fn write_pages(tracee: &mut Tracee, snapshot: &Snapshot, plan: &PagePlan) -> Result<u64> {
    let ps = page_size();
    if let Some(longest) = plan.zeros.iter().map(|z| z.end - z.start).max() {
        let zero = vec![0u8; longest as usize];
        for z in &plan.zeros {
            tracee.mem()?.write(z.start, &zero[..(z.end - z.start) as usize])?;
        }
    }
    let mut restored = 0;
    for &(img, first, count) in &plan.writes {
        let image = &snapshot.images[img];
        let mut p = first;
        while p < first + count {
            let run = image.run_at(p).ok_or_else(|| Error::GuestDiverged(format!("page {p} not in snapshot")))?;
            let stop = (first + count).min(run.end());
            let bytes = image.span(p, stop - p).expect("span lies inside one run");
            tracee.mem()?.write(image.region.start + p * ps, bytes).map_err(|e| match e {
                e @ Error::PartialTransfer { .. } => Error::GuestDiverged(e.to_string()),
                e => e,
            })?;
            restored += stop - p;
            p = stop;
        }
    }
    Ok(restored)
}

fn check_threads(pid: i32, snapshot: &Snapshot) -> Result<()> {
    let mut now = list_threads(pid)?;
    let mut then: Vec<i32> = snapshot.threads.iter().map(|t| t.tid).collect();
    now.sort_unstable();
    then.sort_unstable();
    if now != then {
        return Err(Error::GuestDiverged(format!("thread set changed from {then:?} to {now:?}")));
    }
    Ok(())
}

fn restore_registers(snapshot: &Snapshot) -> Result<()> {
    for t in &snapshot.threads {
        set_thread_registers(t.tid, t)?;
    }
    Ok(())
}

fn advise(inj: &mut Injector<'_>, ranges: &[Range<u64>]) -> Result<()> {
    for r in ranges {
        inj.call(SyscallRequest::new(nr::MADVISE, &[r.start, r.end - r.start, libc::MADV_DONTNEED as u64]))?;
    }
    Ok(())
}

/// Runs the full restore sequence. The guest may be running (it is
/// interrupted first) and is left stopped unless `opts.resume` is set.
pub fn restore(
    tracee: &mut Tracee,
    snapshot: &Snapshot,
    tracker: &mut DirtyTracker,
    opts: &RestoreOptions,
) -> Result<RestoreReport> {
    let mut timer = StepTimer::start();
    let mut report = RestoreReport::default();
    let pid = tracee.pid();
    if !tracee.is_stopped() {
        quiesce(tracee)?;
    }
    timer.lap(Step::Interrupting);

    check_threads(pid, snapshot)?;
    let current = read_memory_layout(pid)?;
    timer.lap(Step::ReadingMaps);

    let pages = plan_pages(tracee, snapshot, &current, tracker.backend(), opts.zero_full_stack)?;
    timer.lap(Step::ScanningPages);

    let layout = plan_layout(snapshot, &current);
    let delta = diff_layout(&snapshot.layout, &current);
    timer.lap(Step::DiffingLayout);

    // The program break is checked exactly once, on the first restore after
    // the snapshot.
    let verify_brk = tracker.epoch() == snapshot.epoch;
    let mut inj = Injector { tracee, tid: pid, count: 0 };
    apply_layout(&mut inj, snapshot, &layout, verify_brk, &mut timer)?;

    report.pages_restored = write_pages(inj.tracee, snapshot, &pages)?;
    timer.lap(Step::RestoringPageContents);

    match opts.order {
        RestoreOrder::RegistersFirst => {
            restore_registers(snapshot)?;
            timer.lap(Step::RestoringRegisters);
            advise(&mut inj, &pages.advise)?;
            timer.lap(Step::SyscallMadvise);
        }
        RestoreOrder::MadviseFirst => {
            advise(&mut inj, &pages.advise)?;
            timer.lap(Step::SyscallMadvise);
            restore_registers(snapshot)?;
            timer.lap(Step::RestoringRegisters);
        }
    }
    report.syscalls_injected = inj.count;

    tracker.rearm(tracee, &snapshot.layout)?;
    timer.lap(Step::ClearingSoftDirty);

    if opts.resume {
        tracee.resume()?;
        timer.lap(Step::Detaching);
    }

    report.pages_scanned = pages.pages_scanned;
    report.dirty_pages = pages.dirty.total_pages();
    report.pages_zeroed = pages.zeros.iter().map(|z| (z.end - z.start) / page_size()).sum();
    report.pages_advised = pages.advise.iter().map(|z| (z.end - z.start) / page_size()).sum();
    report.layout_changes = delta.structural_changes() as u64 + u64::from(delta.brk_delta != 0);
    timer.finish(&mut report);
    debug!(
        "restored {pid}: {} pages, {} syscalls, {} layout changes in {} us",
        report.pages_restored, report.syscalls_injected, report.layout_changes, report.total_us
    );
    Ok(report)
}

/// Measures what a restore would have to do without changing the guest.
/// Tracking is not reset, so dirty pages accumulate across calls.
pub fn inspect(
    tracee: &mut Tracee,
    snapshot: &Snapshot,
    tracker: &DirtyTracker,
    resume: bool,
) -> Result<(RestoreReport, LayoutDelta)> {
    let mut timer = StepTimer::start();
    let mut report = RestoreReport::default();
    let pid = tracee.pid();
    if !tracee.is_stopped() {
        quiesce(tracee)?;
    }
    timer.lap(Step::Interrupting);
    let current = read_memory_layout(pid)?;
    timer.lap(Step::ReadingMaps);
    let pages = plan_pages(tracee, snapshot, &current, tracker.backend(), false)?;
    timer.lap(Step::ScanningPages);
    let mut delta = diff_layout(&snapshot.layout, &current);
    delta.newly_paged = pages.advise.clone();
    timer.lap(Step::DiffingLayout);
    if resume {
        tracee.resume()?;
        timer.lap(Step::Detaching);
    }
    report.pages_scanned = pages.pages_scanned;
    report.dirty_pages = pages.dirty.total_pages();
    report.layout_changes = delta.structural_changes() as u64 + u64::from(delta.brk_delta != 0);
    timer.finish(&mut report);
    Ok((report, delta))
}

/// Layout delta plus newly paged ranges, as a restore would see them now.
pub fn pending_delta(tracee: &mut Tracee, snapshot: &Snapshot, tracker: &DirtyTracker) -> Result<LayoutDelta> {
    let current = read_memory_layout(tracee.pid())?;
    let pages = plan_pages(tracee, snapshot, &current, tracker.backend(), false)?;
    let mut delta = diff_layout(&snapshot.layout, &current);
    delta.newly_paged = pages.advise;
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, SystemTime};

    fn region(start: u64, pages: u64, perms: Perms, kind: RegionKind) -> MemoryRegion {
        let ps = page_size();
        MemoryRegion::new(start * ps, (start + pages) * ps, perms, kind)
    }

    fn snap_of(regions: Vec<MemoryRegion>, brk: u64) -> Snapshot {
        Snapshot {
            layout: MemoryLayout { pid: 1, regions, brk },
            images: Vec::new(),
            excluded: Vec::new(),
            threads: Vec::new(),
            interrupted: Vec::new(),
            brk,
            exact_brk: brk,
            epoch: 1,
            captured_at: SystemTime::now(),
            capture_duration: Duration::ZERO,
            byte_size: 0,
        }
    }

    const RO: Perms = Perms { read: true, write: false, exec: false, shared: false };

    #[test]
    fn identical_layouts_plan_nothing() {
        let regs = vec![region(10, 4, Perms::rw(), RegionKind::Heap), region(20, 2, RO, RegionKind::Anonymous)];
        let s = snap_of(regs.clone(), 14 * page_size());
        let cur = MemoryLayout { pid: 1, regions: regs, brk: 14 * page_size() };
        assert!(plan_layout(&s, &cur).is_empty());
    }

    #[test]
    fn plans_each_kind_of_change() {
        let ps = page_size();
        let s = snap_of(
            vec![
                region(10, 4, Perms::rw(), RegionKind::Heap),
                region(20, 4, Perms::rw(), RegionKind::Anonymous),
                region(30, 2, Perms::rw(), RegionKind::Anonymous),
            ],
            14 * ps,
        );
        let cur = MemoryLayout {
            pid: 1,
            regions: vec![
                region(10, 8, Perms::rw(), RegionKind::Heap),
                region(20, 2, Perms::rw(), RegionKind::Anonymous),
                region(22, 2, RO, RegionKind::Anonymous),
                region(40, 3, Perms::rw(), RegionKind::Anonymous),
            ],
            brk: 18 * ps,
        };
        let plan = plan_layout(&s, &cur);
        assert_eq!(plan.brk, Some(14 * ps));
        assert_eq!(
            plan.ops,
            vec![
                LayoutOp::Protect(22 * ps..24 * ps, Perms::rw()),
                LayoutOp::Map(region(30, 2, Perms::rw(), RegionKind::Anonymous)),
                LayoutOp::Unmap(40 * ps..43 * ps),
            ]
        );
    }

    #[test]
    fn file_backed_replacement_is_remapped_from_its_offset() {
        let ps = page_size();
        let file = RegionKind::File { path: "/bin/true".into(), offset: 0 };
        let s = snap_of(vec![region(10, 4, RO, file)], 0);
        let cur = MemoryLayout { pid: 1, regions: vec![region(12, 1, RO, RegionKind::Anonymous)], brk: 0 };
        let plan = plan_layout(&s, &cur);
        let off = |o: u64| RegionKind::File { path: "/bin/true".into(), offset: o * ps };
        assert_eq!(plan.ops, vec![LayoutOp::Map(region(10, 4, RO, off(0)))]);
    }
}
