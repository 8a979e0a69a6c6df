//! Per-request copies of a stopped template process.
//!
//! The template is made to call `clone(CLONE_PARENT | SIGCHLD)`, so the copy
//! is our child and can be reaped with `waitpid`. Fork tracing auto-attaches
//! the copy; it gets the template's pre-injection registers and is detached.

use log::debug;
use nix::errno::Errno;
use nix::sys::ptrace;
use nix::sys::signal::{kill, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;

use crate::error::{Error, Result};
use crate::proc::regs::{restartable_syscall, set_fp, set_gp, GpRegs};
use crate::proc::{list_threads, ThreadRegisters, Tracee};
use crate::restore::inject::{inject_syscall, nr, SyscallRequest};

/// Rewinds a thread that was stopped inside an interrupted syscall so the
/// syscall instruction runs again when it resumes. A fresh copy does not go
/// through the signal path that would otherwise do this.
pub fn restart_interrupted_syscall(mut gp: GpRegs) -> GpRegs {
    if let Some(nr) = restartable_syscall(&gp) {
        gp.rax = nr;
        gp.rip -= 2;
        gp.orig_rax = u64::MAX;
    }
    gp
}

/// Checks that the template can be forked faithfully.
pub fn check_template(pid: i32) -> Result<()> {
    let threads = list_threads(pid)?;
    if threads.len() > 1 {
        return Err(Error::ModeUnsupported(format!(
            "fork mode needs a single-threaded guest; {pid} has {} threads",
            threads.len()
        )));
    }
    Ok(())
}

/// A running copy of the template.
#[derive(Debug)]
pub struct ForkedChild {
    pub pid: i32,
    exited: bool,
}

impl ForkedChild {
    /// Non-blocking check whether the copy has exited.
    pub fn poll_exit(&mut self) -> Result<bool> {
        if self.exited {
            return Ok(true);
        }
        match waitpid(Pid::from_raw(self.pid), Some(WaitPidFlag::WNOHANG)) {
            Ok(WaitStatus::StillAlive) => Ok(false),
            Ok(WaitStatus::Exited(..) | WaitStatus::Signaled(..)) | Err(Errno::ECHILD) => {
                self.exited = true;
                Ok(true)
            }
            Ok(_) | Err(Errno::EINTR) => Ok(false),
            Err(e) => Err(Error::os(self.pid, "waitpid", e)),
        }
    }

    /// Kills and reaps the copy.
    pub fn kill(&mut self) {
        if self.exited {
            return;
        }
        let pid = Pid::from_raw(self.pid);
        let _ = kill(pid, Signal::SIGKILL);
        loop {
            match waitpid(pid, None) {
                Err(Errno::EINTR) => continue,
                Ok(WaitStatus::Exited(..) | WaitStatus::Signaled(..)) | Err(_) => break,
                Ok(_) => continue,
            }
        }
        self.exited = true;
    }
}

impl Drop for ForkedChild {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Forks the stopped `template` and lets the copy continue from `regs`.
pub fn fork_template(template: &mut Tracee, regs: &ThreadRegisters) -> Result<ForkedChild> {
    let tid = template.pid();
    let flags = (libc::CLONE_PARENT | libc::SIGCHLD) as u64;
    let child = inject_syscall(template, tid, &SyscallRequest::new(nr::CLONE, &[flags, 0, 0, 0, 0]))? as i32;
    template.fork_events.remove(&child);
    let mut forked = ForkedChild { pid: child, exited: false };
    let pid = Pid::from_raw(child);

    // The auto-attached copy reports one stop before it runs any code.
    loop {
        match waitpid(pid, Some(WaitPidFlag::__WALL)) {
            Ok(WaitStatus::Stopped(..) | WaitStatus::PtraceEvent(..)) => break,
            Ok(WaitStatus::Exited(..) | WaitStatus::Signaled(..)) => {
                forked.exited = true;
                return Err(Error::ContainerLost(format!("forked copy {child} died before starting")));
            }
            Ok(_) | Err(Errno::EINTR) => continue,
            Err(e) => return Err(Error::os(child, "waitpid", e)),
        }
    }
    set_gp(child, restart_interrupted_syscall(regs.gp()))?;
    set_fp(child, &regs.fp())?;
    ptrace::detach(pid, None).map_err(|e| Error::os(child, "PTRACE_DETACH", e))?;
    debug!("template {tid}: forked copy {child}");
    Ok(forked)
}
