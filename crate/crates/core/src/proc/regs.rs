//! Per-thread CPU state.

use std::fmt;
use std::mem::{size_of, MaybeUninit};

use nix::errno::Errno;
use nix::sys::ptrace;
use nix::unistd::Pid;

use crate::error::{Error, Result};

#[cfg(not(target_arch = "x86_64"))]
compile_error!("register capture and syscall injection are implemented for x86_64 only");

pub type GpRegs = libc::user_regs_struct;
pub type FpRegs = libc::user_fpregs_struct;

const GP_SIZE: usize = size_of::<GpRegs>();
const FP_SIZE: usize = size_of::<FpRegs>();

/// General-purpose plus FPU/SSE register file of one thread, kept as an
/// opaque fixed-size blob so two captures compare byte-for-byte.
#[derive(Clone, PartialEq, Eq)]
pub struct ThreadRegisters {
    pub tid: i32,
    blob: Box<[u8; GP_SIZE + FP_SIZE]>,
}

impl fmt::Debug for ThreadRegisters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let gp = self.gp();
        f.debug_struct("ThreadRegisters")
            .field("tid", &self.tid)
            .field("rip", &format_args!("{:#x}", gp.rip))
            .field("rsp", &format_args!("{:#x}", gp.rsp))
            .field("rax", &format_args!("{:#x}", gp.rax))
            .field("orig_rax", &format_args!("{:#x}", gp.orig_rax))
            .finish()
    }
}

impl ThreadRegisters {
    pub const SIZE: usize = GP_SIZE + FP_SIZE;

    pub fn from_parts(tid: i32, gp: &GpRegs, fp: &FpRegs) -> Self {
        let mut blob = Box::new([0u8; GP_SIZE + FP_SIZE]);
        // SAFETY: both are plain-old-data C structs; we copy their exact bytes.
        unsafe {
            std::ptr::copy_nonoverlapping(gp as *const GpRegs as *const u8, blob.as_mut_ptr(), GP_SIZE);
            std::ptr::copy_nonoverlapping(
                fp as *const FpRegs as *const u8,
                blob.as_mut_ptr().add(GP_SIZE),
                FP_SIZE,
            );
        }
        ThreadRegisters { tid, blob }
    }

    pub fn gp(&self) -> GpRegs {
        // SAFETY: the blob was filled from a GpRegs; any bit pattern is valid for it.
        unsafe { std::ptr::read_unaligned(self.blob.as_ptr() as *const GpRegs) }
    }

    pub fn fp(&self) -> FpRegs {
        // SAFETY: as above, for the FpRegs half.
        unsafe { std::ptr::read_unaligned(self.blob.as_ptr().add(GP_SIZE) as *const FpRegs) }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.blob[..]
    }

    pub fn instruction_pointer(&self) -> u64 {
        self.gp().rip
    }

    pub fn stack_pointer(&self) -> u64 {
        self.gp().rsp
    }

    /// Syscall number if the thread stopped inside a syscall that the kernel
    /// will restart on resume.
    pub fn interrupted_syscall(&self) -> Option<u64> {
        restartable_syscall(&self.gp())
    }
}

const ERESTARTSYS: i64 = 512;
const ERESTARTNOINTR: i64 = 513;
const ERESTARTNOHAND: i64 = 514;

pub fn restartable_syscall(gp: &GpRegs) -> Option<u64> {
    let ret = -(gp.rax as i64);
    ((gp.orig_rax as i64) >= 0 && matches!(ret, ERESTARTSYS | ERESTARTNOINTR | ERESTARTNOHAND)).then_some(gp.orig_rax)
}

pub fn get_gp(tid: i32) -> Result<GpRegs> {
    ptrace::getregs(Pid::from_raw(tid)).map_err(|e| reg_err(tid, e))
}

pub fn set_gp(tid: i32, regs: GpRegs) -> Result<()> {
    ptrace::setregs(Pid::from_raw(tid), regs).map_err(|e| reg_err(tid, e))
}

pub fn get_fp(tid: i32) -> Result<FpRegs> {
    let mut fp = MaybeUninit::<FpRegs>::zeroed();
    // SAFETY: PTRACE_GETFPREGS writes exactly one user_fpregs_struct to data.
    let ret = unsafe {
        libc::ptrace(libc::PTRACE_GETFPREGS, tid, std::ptr::null_mut::<libc::c_void>(), fp.as_mut_ptr())
    };
    if ret < 0 {
        return Err(reg_err(tid, Errno::last()));
    }
    // SAFETY: initialized by the kernel above (and zeroed before).
    Ok(unsafe { fp.assume_init() })
}

pub fn set_fp(tid: i32, fp: &FpRegs) -> Result<()> {
    // SAFETY: PTRACE_SETFPREGS reads one user_fpregs_struct from data.
    let ret = unsafe {
        libc::ptrace(
            libc::PTRACE_SETFPREGS,
            tid,
            std::ptr::null_mut::<libc::c_void>(),
            fp as *const FpRegs as *mut libc::c_void,
        )
    };
    if ret < 0 {
        return Err(reg_err(tid, Errno::last()));
    }
    Ok(())
}

/// Captures the full register file of a ptrace-stopped thread.
pub fn capture_thread_registers(tid: i32) -> Result<ThreadRegisters> {
    let gp = get_gp(tid)?;
    let fp = get_fp(tid)?;
    Ok(ThreadRegisters::from_parts(tid, &gp, &fp))
}

/// Applies a register file captured earlier (possibly from another thread id).
pub fn set_thread_registers(tid: i32, regs: &ThreadRegisters) -> Result<()> {
    set_gp(tid, regs.gp())?;
    set_fp(tid, &regs.fp())
}

fn reg_err(tid: i32, e: Errno) -> Error {
    match e {
        // ptrace reports a running (or untraced) thread as ESRCH; tell the
        // two cases apart by whether the task still exists.
        Errno::ESRCH if std::path::Path::new(&format!("/proc/{tid}")).exists() => {
            Error::NotStopped(tid)
        }
        e => Error::os(tid, "ptrace regs", e),
    }
}
