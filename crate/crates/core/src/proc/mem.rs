//! Byte transfer to and from guest memory.
//!
//! The bulk path goes through `/proc/<pid>/mem`, which the kernel services
//! with forced access so read-only and `PROT_NONE` private pages can be
//! rewritten without touching their protection. When that file refuses an
//! access (hardened `proc_mem.force_override` settings), transfers fall back
//! to word-sized `PTRACE_PEEKDATA`/`PTRACE_POKEDATA`, which needs a stopped
//! thread.

use std::ffi::c_void;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;

use nix::errno::Errno;
use nix::sys::ptrace;
use nix::unistd::Pid;

use crate::error::{Error, Result};

const WORD: usize = std::mem::size_of::<libc::c_long>();

#[derive(Debug)]
pub struct MemFile {
    pid: i32,
    file: File,
}

impl MemFile {
    pub fn open(pid: i32) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(format!("/proc/{pid}/mem"))
            .map_err(|e| Error::io(pid, e))?;
        Ok(MemFile { pid, file })
    }

    pub fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.read_into(addr, &mut buf)?;
        Ok(buf)
    }

    pub fn read_into(&self, addr: u64, buf: &mut [u8]) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.file.read_at(&mut buf[done..], addr + done as u64) {
                Ok(0) => break,
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) if is_hole(&e) => break,
                Err(e) if is_refused(&e) => {
                    return peek_into(self.pid, addr + done as u64, &mut buf[done..])
                        .map_err(|err| shift(err, done));
                }
                Err(e) => return Err(Error::io(self.pid, e)),
            }
        }
        if done < buf.len() {
            return Err(Error::PartialTransfer { addr, done, len: buf.len() });
        }
        Ok(())
    }

    pub fn write(&self, addr: u64, data: &[u8]) -> Result<()> {
        let mut done = 0;
        while done < data.len() {
            match self.file.write_at(&data[done..], addr + done as u64) {
                Ok(0) => break,
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) if is_hole(&e) => break,
                Err(e) if is_refused(&e) => {
                    return poke_from(self.pid, addr + done as u64, &data[done..])
                        .map_err(|err| shift(err, done));
                }
                Err(e) => return Err(Error::io(self.pid, e)),
            }
        }
        if done < data.len() {
            return Err(Error::PartialTransfer { addr, done, len: data.len() });
        }
        Ok(())
    }
}

fn is_hole(e: &std::io::Error) -> bool {
    matches!(e.raw_os_error(), Some(libc::EIO) | Some(libc::EFAULT))
}

fn is_refused(e: &std::io::Error) -> bool {
    matches!(e.raw_os_error(), Some(libc::EPERM) | Some(libc::EACCES))
}

fn shift(err: Error, by: usize) -> Error {
    match err {
        Error::PartialTransfer { addr, done, len } => Error::PartialTransfer {
            addr: addr - by as u64,
            done: done + by,
            len: len + by,
        },
        e => e,
    }
}

fn peek(pid: i32, addr: u64) -> std::result::Result<libc::c_long, Errno> {
    ptrace::read(Pid::from_raw(pid), addr as *mut c_void)
}

fn map_word_err(pid: i32, addr: u64, start: u64, done: usize, len: usize, e: Errno) -> Error {
    match e {
        Errno::EIO | Errno::EFAULT => Error::PartialTransfer { addr: start, done, len },
        Errno::EPERM | Errno::EACCES => Error::PermissionDenied { addr },
        e => Error::os(pid, "ptrace peek/poke", e),
    }
}

/// Word-at-a-time read through ptrace.
pub fn peek_into(pid: i32, addr: u64, buf: &mut [u8]) -> Result<()> {
    let base = addr & !(WORD as u64 - 1);
    let mut cur = base;
    let end = addr + buf.len() as u64;
    while cur < end {
        let done = cur.saturating_sub(addr) as usize;
        let word = peek(pid, cur).map_err(|e| map_word_err(pid, cur, addr, done, buf.len(), e))?;
        let bytes = word.to_ne_bytes();
        for (i, b) in bytes.iter().enumerate() {
            let a = cur + i as u64;
            if a >= addr && a < end {
                buf[(a - addr) as usize] = *b;
            }
        }
        cur += WORD as u64;
    }
    Ok(())
}

/// Word-at-a-time write through ptrace; partial words are read-modify-written.
pub fn poke_from(pid: i32, addr: u64, data: &[u8]) -> Result<()> {
    let base = addr & !(WORD as u64 - 1);
    let end = addr + data.len() as u64;
    let mut cur = base;
    while cur < end {
        let done = cur.saturating_sub(addr) as usize;
        let fail = |e| map_word_err(pid, cur, addr, done, data.len(), e);
        let mut bytes = if cur < addr || cur + WORD as u64 > end {
            peek(pid, cur).map_err(fail)?.to_ne_bytes()
        } else {
            [0u8; WORD]
        };
        for (i, b) in bytes.iter_mut().enumerate() {
            let a = cur + i as u64;
            if a >= addr && a < end {
                *b = data[(a - addr) as usize];
            }
        }
        let word = libc::c_long::from_ne_bytes(bytes);
        ptrace::write(Pid::from_raw(pid), cur as *mut c_void, word).map_err(fail)?;
        cur += WORD as u64;
    }
    Ok(())
}
