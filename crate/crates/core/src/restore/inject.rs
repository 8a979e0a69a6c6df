//! Running system calls inside a stopped guest thread.
//!
//! The thread's registers are steered to a `syscall` instruction that already
//! exists in an executable mapping (the vDSO has several), the thread is
//! single-stepped over it, and the original registers are put back. Guest
//! memory is only written when no such instruction can be found, in which
//! case the two instruction bytes at the current instruction pointer are
//! borrowed and restored afterwards.

use log::{debug, warn};
use nix::sys::ptrace;
use nix::sys::signal::Signal;
use nix::sys::wait::WaitStatus;
use nix::unistd::Pid;

use crate::error::{Error, Result};
use crate::proc::maps::RegionKind;
use crate::proc::{read_memory_layout, regs, Tracee};

const SYSCALL_INSN: [u8; 2] = [0x0f, 0x05];
const GADGET_SCAN_LIMIT: u64 = 64 << 20;

pub mod nr {
    pub const CLOSE: i64 = libc::SYS_close;
    pub const MMAP: i64 = libc::SYS_mmap;
    pub const MPROTECT: i64 = libc::SYS_mprotect;
    pub const MUNMAP: i64 = libc::SYS_munmap;
    pub const BRK: i64 = libc::SYS_brk;
    pub const MADVISE: i64 = libc::SYS_madvise;
    pub const GETPID: i64 = libc::SYS_getpid;
    pub const FORK: i64 = libc::SYS_fork;
    pub const CLONE: i64 = libc::SYS_clone;
    pub const WAIT4: i64 = libc::SYS_wait4;
    pub const OPENAT: i64 = libc::SYS_openat;
    pub const IOCTL: i64 = libc::SYS_ioctl;
    pub const USERFAULTFD: i64 = libc::SYS_userfaultfd;
}

pub fn syscall_name(number: i64) -> &'static str {
    match number {
        nr::CLOSE => "close",
        nr::MMAP => "mmap",
        nr::MPROTECT => "mprotect",
        nr::MUNMAP => "munmap",
        nr::BRK => "brk",
        nr::MADVISE => "madvise",
        nr::GETPID => "getpid",
        nr::FORK => "fork",
        nr::CLONE => "clone",
        nr::WAIT4 => "wait4",
        nr::OPENAT => "openat",
        nr::IOCTL => "ioctl",
        nr::USERFAULTFD => "userfaultfd",
        _ => "syscall",
    }
}

/// Success predicate applied to an injected syscall's return value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    Any,
    /// Not a negated errno.
    Success,
    Equals(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyscallRequest {
    pub number: i64,
    pub args: [u64; 6],
    pub expected: Expect,
}

impl SyscallRequest {
    pub fn new(number: i64, args: &[u64]) -> Self {
        assert!(args.len() <= 6, "at most six syscall arguments");
        let mut a = [0u64; 6];
        a[..args.len()].copy_from_slice(args);
        SyscallRequest { number, args: a, expected: Expect::Success }
    }

    pub fn expect(mut self, expected: Expect) -> Self {
        self.expected = expected;
        self
    }

    pub fn name(&self) -> &'static str {
        syscall_name(self.number)
    }

    fn accepts(&self, ret: u64) -> bool {
        match self.expected {
            Expect::Any => true,
            Expect::Success => !is_errno(ret),
            Expect::Equals(v) => ret == v,
        }
    }
}

pub fn is_errno(ret: u64) -> bool {
    (ret as i64) < 0 && (ret as i64) >= -4095
}

/// Locates an executable `syscall` instruction, preferring the vDSO, then
/// the main executable, then any other executable mapping.
pub fn find_gadget(tracee: &mut Tracee) -> Result<Option<u64>> {
    let pid = tracee.pid();
    let layout = read_memory_layout(pid)?;
    let exe = std::fs::read_link(format!("/proc/{pid}/exe")).ok();
    let mut candidates: Vec<_> = layout.regions.iter().filter(|r| r.perms.exec).collect();
    candidates.sort_by_key(|r| match &r.kind {
        RegionKind::Vdso => 0,
        RegionKind::File { path, .. } if Some(path) == exe.as_ref() => 1,
        RegionKind::Vsyscall => 3,
        _ => 2,
    });
    for region in candidates {
        if region.kind == RegionKind::Vsyscall {
            // Emulated on modern kernels; not executable from userspace.
            continue;
        }
        let len = region.len().min(GADGET_SCAN_LIMIT) as usize;
        let Ok(bytes) = tracee.mem()?.read(region.start, len) else { continue };
        if let Some(off) = bytes.windows(2).position(|w| w == SYSCALL_INSN) {
            let addr = region.start + off as u64;
            debug!("guest {pid}: syscall gadget at {addr:#x} in {:?}", region.kind);
            return Ok(Some(addr));
        }
    }
    Ok(None)
}

fn gadget(tracee: &mut Tracee) -> Result<Option<u64>> {
    if tracee.gadget.is_none() {
        tracee.gadget = find_gadget(tracee)?;
    }
    Ok(tracee.gadget)
}

/// Executes `req` in thread `tid` (which must be ptrace-stopped) and returns
/// the raw return value. All registers are restored afterwards.
pub fn inject_syscall(tracee: &mut Tracee, tid: i32, req: &SyscallRequest) -> Result<u64> {
    if !matches!(tracee.thread_state(tid), Some(crate::proc::tracee::ThreadState::Stopped { .. })) {
        return Err(Error::NotStopped(tid));
    }
    let saved = regs::get_gp(tid)?;
    let (entry, borrowed) = match gadget(tracee)? {
        Some(addr) => (addr, None),
        None => {
            warn!("guest {}: no syscall gadget, borrowing bytes at rip", tracee.pid());
            let rip = saved.rip;
            let orig = tracee.mem()?.read(rip, 2)?;
            tracee.mem()?.write(rip, &SYSCALL_INSN)?;
            (rip, Some(orig))
        }
    };

    let mut regs = saved;
    regs.rax = req.number as u64;
    regs.orig_rax = u64::MAX;
    regs.rdi = req.args[0];
    regs.rsi = req.args[1];
    regs.rdx = req.args[2];
    regs.r10 = req.args[3];
    regs.r8 = req.args[4];
    regs.r9 = req.args[5];
    regs.rip = entry;
    regs::set_gp(tid, regs)?;

    let outcome = step_over_syscall(tracee, tid);
    let result = outcome.and_then(|_| regs::get_gp(tid));

    if let Some(orig) = borrowed {
        tracee.mem()?.write(entry, &orig)?;
    }
    if tracee.is_alive() {
        regs::set_gp(tid, saved)?;
    }
    let after = result?;
    if after.rip != entry + SYSCALL_INSN.len() as u64 {
        return Err(Error::GuestDiverged(format!(
            "injected {} stopped at {:#x}, expected {:#x}",
            req.name(),
            after.rip,
            entry + 2
        )));
    }
    let ret = after.rax;
    if !req.accepts(ret) {
        return Err(Error::SyscallFailed { name: req.name(), ret });
    }
    Ok(ret)
}

fn step_over_syscall(tracee: &mut Tracee, tid: i32) -> Result<()> {
    let pid = Pid::from_raw(tid);
    ptrace::step(pid, None).map_err(|e| Error::os(tid, "PTRACE_SINGLESTEP", e))?;
    loop {
        match tracee.wait_thread(tid)? {
            WaitStatus::Stopped(_, Signal::SIGTRAP) => {
                tracee.mark_stopped(tid);
                return Ok(());
            }
            status @ (WaitStatus::Exited(..) | WaitStatus::Signaled(..)) => {
                tracee.handle(status, true)?;
                return Err(Error::ProcessGone(tid));
            }
            status => {
                // fork events, or a signal that raced in: record and keep stepping
                tracee.handle(status, true)?;
                ptrace::step(pid, None).map_err(|e| Error::os(tid, "PTRACE_SINGLESTEP", e))?;
            }
        }
    }
}

/// Temporarily places `bytes` on the thread's stack below the red zone and
/// runs `f` with the address; the previous stack contents are restored.
pub fn with_stack_scratch<T>(
    tracee: &mut Tracee,
    tid: i32,
    bytes: &[u8],
    f: impl FnOnce(&mut Tracee, u64) -> Result<T>,
) -> Result<T> {
    let sp = regs::get_gp(tid)?.rsp;
    let addr = (sp - 256 - bytes.len() as u64) & !15;
    let saved = tracee.mem()?.read(addr, bytes.len())?;
    tracee.mem()?.write(addr, bytes)?;
    let out = f(tracee, addr);
    tracee.mem()?.write(addr, &saved)?;
    out
}
