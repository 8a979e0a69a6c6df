//! `/proc/<pid>/maps` parsing and the page-aligned layout model built from it.

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::proc::page_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
    pub shared: bool,
}

impl Perms {
    pub const fn rw() -> Self {
        Perms { read: true, write: true, exec: false, shared: false }
    }

    /// `PROT_*` bits for mmap/mprotect.
    pub fn prot(&self) -> i32 {
        let mut prot = libc::PROT_NONE;
        if self.read {
            prot |= libc::PROT_READ;
        }
        if self.write {
            prot |= libc::PROT_WRITE;
        }
        if self.exec {
            prot |= libc::PROT_EXEC;
        }
        prot
    }

    fn parse(field: &str) -> Option<Self> {
        let b = field.as_bytes();
        if b.len() != 4 {
            return None;
        }
        let flag = |c: u8, set: u8| match c {
            b'-' => Some(false),
            c if c == set => Some(true),
            _ => None,
        };
        Some(Perms {
            read: flag(b[0], b'r')?,
            write: flag(b[1], b'w')?,
            exec: flag(b[2], b'x')?,
            shared: match b[3] {
                b's' => true,
                b'p' => false,
                _ => return None,
            },
        })
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |on: bool, ch: char| if on { ch } else { '-' };
        write!(
            f,
            "{}{}{}{}",
            c(self.read, 'r'),
            c(self.write, 'w'),
            c(self.exec, 'x'),
            if self.shared { 's' } else { 'p' }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Anonymous,
    File { path: PathBuf, offset: u64 },
    Heap,
    Stack,
    Vdso,
    Vvar,
    Vsyscall,
    /// Any other bracketed pseudo-path the kernel reports (e.g. `[uprobes]`).
    Special(String),
}

impl RegionKind {
    pub fn is_kernel_owned(&self) -> bool {
        matches!(
            self,
            RegionKind::Vdso | RegionKind::Vvar | RegionKind::Vsyscall | RegionKind::Special(_)
        )
    }

    fn classify(path: &str, offset: u64, inode: u64) -> Self {
        match path {
            "" => RegionKind::Anonymous,
            "[heap]" => RegionKind::Heap,
            "[stack]" => RegionKind::Stack,
            "[vdso]" => RegionKind::Vdso,
            "[vsyscall]" => RegionKind::Vsyscall,
            p if p.starts_with("[vvar") => RegionKind::Vvar,
            // PR_SET_VMA_ANON_NAME names are still plain anonymous memory.
            p if p.starts_with("[anon:") => RegionKind::Anonymous,
            p if p.starts_with('[') && p.ends_with(']') => RegionKind::Special(p.to_string()),
            // Memory from memfd/shmem and deleted files still has an inode;
            // the path is only informational.
            p if inode != 0 || p.starts_with('/') => {
                RegionKind::File { path: PathBuf::from(p), offset }
            }
            p => RegionKind::Special(p.to_string()),
        }
    }

    /// Whether a region of this kind at `self_end` may be merged with `next`.
    fn continues(&self, self_len: u64, next: &RegionKind) -> bool {
        match (self, next) {
            (RegionKind::Anonymous, RegionKind::Anonymous)
            | (RegionKind::Heap, RegionKind::Heap)
            | (RegionKind::Stack, RegionKind::Stack) => true,
            (RegionKind::File { path: a, offset: oa }, RegionKind::File { path: b, offset: ob }) => {
                a == b && oa + self_len == *ob
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MemoryRegion {
    pub start: u64,
    pub end: u64,
    pub perms: Perms,
    pub kind: RegionKind,
}

impl MemoryRegion {
    pub fn new(start: u64, end: u64, perms: Perms, kind: RegionKind) -> Self {
        MemoryRegion { start, end, perms, kind }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn page_count(&self) -> u64 {
        self.len() / page_size()
    }

    pub fn range(&self) -> Range<u64> {
        self.start..self.end
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn is_kernel_owned(&self) -> bool {
        self.kind.is_kernel_owned()
    }

    /// Private mappings are copy-on-write and can always be rewritten in
    /// place; writable shared ones leak writes outside the process.
    pub fn is_shared_writable(&self) -> bool {
        self.perms.shared && self.perms.write
    }

    /// Sub-range of this region, keeping file offsets consistent.
    pub fn slice(&self, range: Range<u64>) -> MemoryRegion {
        debug_assert!(self.start <= range.start && range.end <= self.end);
        let kind = match &self.kind {
            RegionKind::File { path, offset } => RegionKind::File {
                path: path.clone(),
                offset: offset + (range.start - self.start),
            },
            k => k.clone(),
        };
        MemoryRegion { start: range.start, end: range.end, perms: self.perms, kind }
    }

    /// Two regions are "the same mapping" if their kinds agree once the
    /// file offset is adjusted to a common start address.
    pub fn same_backing(&self, other: &MemoryRegion) -> bool {
        match (&self.kind, &other.kind) {
            (RegionKind::File { path: a, offset: oa }, RegionKind::File { path: b, offset: ob }) => {
                a == b && oa.wrapping_sub(self.start) == ob.wrapping_sub(other.start)
            }
            (a, b) => a == b,
        }
    }
}

impl fmt::Display for MemoryRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}-{:x} {} {:?}", self.start, self.end, self.perms, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryLayout {
    pub pid: i32,
    pub regions: Vec<MemoryRegion>,
    pub brk: u64,
}

impl MemoryLayout {
    /// Parses the text of a maps file. Adjacent VMAs that differ only in
    /// kernel bookkeeping (same perms, contiguous backing) are coalesced so
    /// that two layouts compare equal whenever they describe the same
    /// address space.
    pub fn parse(pid: i32, text: &str) -> Result<Self> {
        let ps = page_size();
        let mut regions: Vec<MemoryRegion> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let region = parse_line(line)?;
            if region.start % ps != 0 || region.end % ps != 0 || region.start >= region.end {
                return Err(Error::Parse(line.to_string()));
            }
            if let Some(prev) = regions.last_mut() {
                if prev.end > region.start {
                    return Err(Error::Parse(line.to_string()));
                }
                if prev.end == region.start
                    && prev.perms == region.perms
                    && prev.kind.continues(prev.len(), &region.kind)
                {
                    prev.end = region.end;
                    continue;
                }
            }
            regions.push(region);
        }
        let brk = regions
            .iter()
            .find(|r| r.kind == RegionKind::Heap)
            .map(|r| r.end)
            .unwrap_or(0);
        Ok(MemoryLayout { pid, regions, brk })
    }

    pub fn heap(&self) -> Option<&MemoryRegion> {
        self.regions.iter().find(|r| r.kind == RegionKind::Heap)
    }

    pub fn stack(&self) -> Option<&MemoryRegion> {
        self.regions.iter().find(|r| r.kind == RegionKind::Stack)
    }

    pub fn region_containing(&self, addr: u64) -> Option<&MemoryRegion> {
        let idx = self.regions.partition_point(|r| r.end <= addr);
        self.regions.get(idx).filter(|r| r.contains(addr))
    }

    /// Regions whose pages are captured, tracked and restored.
    pub fn tracked(&self) -> impl Iterator<Item = &MemoryRegion> {
        self.regions.iter().filter(|r| !r.is_kernel_owned())
    }

    pub fn total_pages(&self) -> u64 {
        self.tracked().map(|r| r.page_count()).sum()
    }

    /// Re-establishes sort order and merges mergeable neighbours.
    pub fn canonicalize(&mut self) {
        self.regions.sort_by_key(|r| r.start);
        let mut out: Vec<MemoryRegion> = Vec::with_capacity(self.regions.len());
        for r in self.regions.drain(..) {
            if let Some(prev) = out.last_mut() {
                if prev.end == r.start && prev.perms == r.perms && prev.kind.continues(prev.len(), &r.kind)
                {
                    prev.end = r.end;
                    continue;
                }
            }
            out.push(r);
        }
        self.regions = out;
    }

    pub fn is_disjoint_sorted(&self) -> bool {
        self.regions.windows(2).all(|w| w[0].end <= w[1].start)
    }
}

fn parse_line(line: &str) -> Result<MemoryRegion> {
    let bad = || Error::Parse(line.to_string());
    let mut rest = line;
    let mut next_field = || -> Option<&str> {
        let trimmed = rest.trim_start();
        let end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        let (field, tail) = trimmed.split_at(end);
        rest = tail;
        (!field.is_empty()).then_some(field)
    };
    let range = next_field().ok_or_else(bad)?;
    let perms = next_field().ok_or_else(bad)?;
    let offset = next_field().ok_or_else(bad)?;
    let _dev = next_field().ok_or_else(bad)?;
    let inode = next_field().ok_or_else(bad)?;
    let path = rest.trim();

    let (start, end) = range.split_once('-').ok_or_else(bad)?;
    let start = u64::from_str_radix(start, 16).map_err(|_| bad())?;
    let end = u64::from_str_radix(end, 16).map_err(|_| bad())?;
    let perms = Perms::parse(perms).ok_or_else(bad)?;
    let offset = u64::from_str_radix(offset, 16).map_err(|_| bad())?;
    let inode: u64 = inode.parse().map_err(|_| bad())?;
    Ok(MemoryRegion { start, end, perms, kind: RegionKind::classify(path, offset, inode) })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
55d0c0a00000-55d0c0a02000 r--p 00000000 fd:01 1311 /usr/bin/guest
55d0c0a02000-55d0c0a05000 r-xp 00002000 fd:01 1311 /usr/bin/guest
55d0c0a05000-55d0c0a06000 rw-p 00005000 fd:01 1311 /usr/bin/guest
55d0c1200000-55d0c1221000 rw-p 00000000 00:00 0                          [heap]
7f1c2a000000-7f1c2a001000 rw-p 00000000 00:00 0
7f1c2a001000-7f1c2a003000 rw-p 00000000 00:00 0
7f1c2a003000-7f1c2a004000 ---p 00000000 00:00 0
7f1c2b000000-7f1c2b001000 r--p 00000000 fd:01 77 /lib/with space.so (deleted)
7ffd1a000000-7ffd1a021000 rw-p 00000000 00:00 0                          [stack]
7ffd1a1f0000-7ffd1a1f4000 r--p 00000000 00:00 0                          [vvar]
7ffd1a1f4000-7ffd1a1f6000 r-xp 00000000 00:00 0                          [vdso]
ffffffffff600000-ffffffffff601000 --xp 00000000 00:00 0                  [vsyscall]
";

    #[test]
    fn parses_and_coalesces() {
        let layout = MemoryLayout::parse(7, SAMPLE).unwrap();
        assert!(layout.is_disjoint_sorted());
        // the two adjacent rw-p anonymous VMAs merge
        let anon: Vec<_> =
            layout.regions.iter().filter(|r| r.kind == RegionKind::Anonymous).collect();
        assert_eq!(anon.len(), 2);
        assert_eq!(anon[0].page_count(), 3);
        assert_eq!(layout.heap().unwrap().end, 0x55d0c1221000);
        assert_eq!(layout.brk, 0x55d0c1221000);
        let deleted = layout.regions.iter().find(|r| matches!(&r.kind, RegionKind::File { path, .. } if path.to_string_lossy().contains("with space"))).unwrap();
        assert_eq!(deleted.page_count(), 1);
        assert_eq!(layout.regions.iter().filter(|r| r.is_kernel_owned()).count(), 3);
        // file segments with different perms stay separate
        assert_eq!(
            layout.regions.iter().filter(|r| matches!(&r.kind, RegionKind::File { path, .. } if path.ends_with("guest"))).count(),
            3
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(MemoryLayout::parse(1, "zzzz-1000 rw-p 0 0:0 0\n"), Err(Error::Parse(_))));
        assert!(matches!(MemoryLayout::parse(1, "1000-2000 rwzp 0 0:0 0\n"), Err(Error::Parse(_))));
        assert!(matches!(MemoryLayout::parse(1, "1000-1800 rw-p 0 0:0 0\n"), Err(Error::Parse(_))));
        // overlapping
        assert!(MemoryLayout::parse(1, "1000-3000 rw-p 0 0:0 0\n2000-4000 r--p 0 0:0 0\n").is_err());
    }

    #[test]
    fn file_slices_keep_offsets() {
        let r = MemoryRegion::new(
            0x10000,
            0x14000,
            Perms { read: true, ..Perms::default() },
            RegionKind::File { path: "/x".into(), offset: 0x2000 },
        );
        let s = r.slice(0x12000..0x13000);
        assert_eq!(s.kind, RegionKind::File { path: "/x".into(), offset: 0x4000 });
        assert!(r.same_backing(&s));
    }
}
