//! Decoding of `/proc/<pid>/pagemap` records.

use std::fs::File;
use std::os::unix::fs::FileExt;

use crate::error::{Error, Result};
use crate::proc::page_size;

const PM_SOFT_DIRTY: u64 = 1 << 55;
const PM_UFFD_WP: u64 = 1 << 57;
const PM_SWAPPED: u64 = 1 << 62;
const PM_PRESENT: u64 = 1 << 63;
const PM_SWAP_TYPE_MASK: u64 = 0x1f;
/// Swap type the kernel uses for PTE markers, which hold no page.
const SWP_PTE_MARKER: u64 = 0x1f;

pub const DEFAULT_BATCH_PAGES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PageFlags {
    pub present: bool,
    pub soft_dirty: bool,
    pub swapped: bool,
    /// Page is write-protected through userfaultfd (bit 57).
    pub uffd_wp: bool,
    /// A PTE marker (e.g. write protection of an empty page), not a swapped page.
    pub marker: bool,
}

impl PageFlags {
    pub fn from_raw(raw: u64) -> Self {
        PageFlags {
            present: raw & PM_PRESENT != 0,
            soft_dirty: raw & PM_SOFT_DIRTY != 0,
            swapped: raw & PM_SWAPPED != 0,
            uffd_wp: raw & PM_UFFD_WP != 0,
            marker: raw & PM_SWAPPED != 0 && raw & PM_PRESENT == 0 && raw & PM_SWAP_TYPE_MASK == SWP_PTE_MARKER,
        }
    }

    /// Backed by memory at all, either resident or in swap.
    pub fn populated(&self) -> bool {
        self.present || (self.swapped && !self.marker)
    }
}

/// Batched reader over one process's pagemap file.
#[derive(Debug)]
pub struct PagemapReader {
    file: File,
    pid: i32,
    batch_pages: usize,
    buf: Vec<u8>,
}

impl PagemapReader {
    pub fn open(pid: i32) -> Result<Self> {
        let file = File::open(format!("/proc/{pid}/pagemap")).map_err(|e| Error::io(pid, e))?;
        Ok(PagemapReader { file, pid, batch_pages: DEFAULT_BATCH_PAGES, buf: Vec::new() })
    }

    pub fn with_batch_pages(mut self, pages: usize) -> Self {
        self.batch_pages = pages.max(1);
        self
    }

    pub fn file(&self) -> &File {
        &self.file
    }

    /// Calls `f(page_index, flags)` for every page of `[start, start + pages * page_size)`.
    pub fn for_each(&mut self, start: u64, pages: u64, mut f: impl FnMut(u64, PageFlags)) -> Result<()> {
        let ps = page_size();
        let mut done = 0u64;
        while done < pages {
            let n = (pages - done).min(self.batch_pages as u64) as usize;
            let addr = start + done * ps;
            self.buf.resize(n * 8, 0);
            let off = addr / ps * 8;
            let mut got = 0usize;
            while got < self.buf.len() {
                match self.file.read_at(&mut self.buf[got..], off + got as u64) {
                    Ok(0) => break,
                    Ok(k) => got += k,
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                    Err(e) => return Err(Error::io(self.pid, e)),
                }
            }
            if got < self.buf.len() {
                return Err(Error::ShortRead { addr, wanted: n, got: got / 8 });
            }
            for (i, rec) in self.buf.chunks_exact(8).enumerate() {
                let raw = u64::from_le_bytes(rec.try_into().unwrap());
                f(done + i as u64, PageFlags::from_raw(raw));
            }
            done += n as u64;
        }
        Ok(())
    }

    pub fn read_flags(&mut self, start: u64, pages: u64) -> Result<Vec<PageFlags>> {
        let mut out = Vec::with_capacity(pages as usize);
        self.for_each(start, pages, |_, f| out.push(f))?;
        Ok(out)
    }
}
