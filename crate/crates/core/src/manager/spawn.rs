//! Starting a guest with piped stdio, optionally under ptrace from its first
//! instruction.
//!
//! `std::process::Command` cannot be used for traced guests: the child must
//! stop itself between fork and exec so it can be seized, and `Command::spawn`
//! waits for exec to complete before returning.

use std::ffi::CString;
use std::fs::File;
use std::os::fd::{AsFd, AsRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::debug;
use nix::poll::{poll, PollFd, PollFlags, PollTimeout};
use nix::sys::ptrace::Options;
use nix::sys::signal::{kill, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::{dup2, fork, pipe2, ForkResult, Gid, Pid, Uid};

use crate::error::{Error, Result};
use crate::proc::tracee::default_options;
use crate::proc::Tracee;

const EXEC_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Debug)]
pub struct SpawnConfig {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Extra environment variables on top of the supervisor's own.
    pub env: Vec<(String, String)>,
    pub run_as_uid: Option<u32>,
    pub run_as_gid: Option<u32>,
    /// Attach with ptrace before the guest executes its first instruction.
    pub trace: bool,
    /// Also auto-attach processes the guest forks.
    pub trace_fork: bool,
    /// Give the guest a pipe on fd 3 for one-byte completion signals.
    pub done_channel: bool,
    /// Pipe the guest's stderr back instead of sharing ours.
    pub capture_stderr: bool,
}

impl SpawnConfig {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        SpawnConfig {
            program: program.into(),
            args,
            env: Vec::new(),
            run_as_uid: None,
            run_as_gid: None,
            trace: true,
            trace_fork: false,
            done_channel: false,
            capture_stderr: false,
        }
    }
}

#[derive(Debug)]
pub struct SpawnedGuest {
    pub pid: i32,
    pub stdin: File,
    pub stdout: File,
    pub stderr: Option<File>,
    pub done: Option<File>,
    pub tracee: Option<Tracee>,
}

fn cstr(bytes: &[u8]) -> Result<CString> {
    CString::new(bytes).map_err(|_| Error::SpawnFailed("argument contains a NUL byte".into()))
}

fn os(op: &'static str) -> impl Fn(nix::errno::Errno) -> Error {
    move |e| Error::SpawnFailed(format!("{op}: {e}"))
}

/// Forks and execs the guest described by `cfg`.
pub fn spawn_guest(cfg: &SpawnConfig) -> Result<SpawnedGuest> {
    let program = cstr(cfg.program.as_os_str().as_bytes())?;
    let mut argv = vec![program.clone()];
    for a in &cfg.args {
        argv.push(cstr(a.as_bytes())?);
    }
    let mut env: Vec<CString> = Vec::new();
    for (k, v) in std::env::vars_os() {
        if cfg.env.iter().any(|(ek, _)| k.as_bytes() == ek.as_bytes()) {
            continue;
        }
        let mut kv = k.as_bytes().to_vec();
        kv.push(b'=');
        kv.extend_from_slice(v.as_bytes());
        env.push(cstr(&kv)?);
    }
    for (k, v) in &cfg.env {
        env.push(cstr(format!("{k}={v}").as_bytes())?);
    }
    // Pointer arrays are built before fork: the child must not allocate.
    let argv_ptrs: Vec<*const libc::c_char> =
        argv.iter().map(|a| a.as_ptr()).chain(std::iter::once(std::ptr::null())).collect();
    let env_ptrs: Vec<*const libc::c_char> =
        env.iter().map(|a| a.as_ptr()).chain(std::iter::once(std::ptr::null())).collect();

    let cloexec = nix::fcntl::OFlag::O_CLOEXEC;
    let (in_r, in_w) = pipe2(cloexec).map_err(os("pipe"))?;
    let (out_r, out_w) = pipe2(cloexec).map_err(os("pipe"))?;
    let err_pipe = if cfg.capture_stderr { Some(pipe2(cloexec).map_err(os("pipe"))?) } else { None };
    let done_pipe = if cfg.done_channel { Some(pipe2(cloexec).map_err(os("pipe"))?) } else { None };
    let (status_r, status_w) = pipe2(cloexec).map_err(os("pipe"))?;

    // SAFETY: the child only calls async-signal-safe functions (dup2,
    // set*id, kill, execvpe, write, _exit) before exec.
    let fork_result = unsafe { fork() }.map_err(os("fork"))?;
    let child = match fork_result {
        ForkResult::Child => {
            let code = child_after_fork(
                cfg,
                &argv_ptrs,
                &env_ptrs,
                &in_r,
                &out_w,
                err_pipe.as_ref().map(|(_, w)| w),
                done_pipe.as_ref().map(|(_, w)| w),
            );
            let bytes = (code as i32).to_ne_bytes();
            // SAFETY: writing to our own pipe then exiting without unwinding.
            unsafe {
                libc::write(status_w.as_raw_fd(), bytes.as_ptr() as *const _, bytes.len());
                libc::_exit(127);
            }
        }
        ForkResult::Parent { child } => child,
    };
    drop((in_r, out_w, status_w));
    let stderr = err_pipe.map(|(r, _w)| File::from(r));
    let done = done_pipe.map(|(r, _w)| File::from(r));

    let tracee = if cfg.trace { Some(attach_stopped_child(child, cfg)?) } else { None };
    let mut guard = KillOnDrop { pid: child.as_raw(), tracee };
    wait_for_exec(&status_r, &mut guard)?;
    debug!("spawned guest {} ({})", child, cfg.program.display());
    let tracee = guard.tracee.take();
    std::mem::forget(guard);
    Ok(SpawnedGuest {
        pid: child.as_raw(),
        stdin: File::from(in_w),
        stdout: File::from(out_r),
        stderr,
        done,
        tracee,
    })
}

fn child_after_fork(
    cfg: &SpawnConfig,
    argv: &[*const libc::c_char],
    env: &[*const libc::c_char],
    stdin: &OwnedFd,
    stdout: &OwnedFd,
    stderr: Option<&OwnedFd>,
    done: Option<&OwnedFd>,
) -> nix::errno::Errno {
    let step = || -> nix::Result<()> {
        dup2(stdin.as_raw_fd(), 0)?;
        dup2(stdout.as_raw_fd(), 1)?;
        if let Some(e) = stderr {
            dup2(e.as_raw_fd(), 2)?;
        }
        if let Some(d) = done {
            dup2(d.as_raw_fd(), 3)?;
        }
        if let Some(uid) = cfg.run_as_uid {
            let gid = cfg.run_as_gid.unwrap_or(uid);
            nix::unistd::setgroups(&[Gid::from_raw(gid)])?;
            nix::unistd::setgid(Gid::from_raw(gid))?;
            nix::unistd::setuid(Uid::from_raw(uid))?;
        }
        if cfg.trace {
            kill(Pid::this(), Signal::SIGSTOP)?;
        }
        // SAFETY: both arrays are NULL-terminated and outlive the call.
        unsafe { libc::execvpe(argv[0], argv.as_ptr(), env.as_ptr()) };
        Err(nix::errno::Errno::last())
    };
    match step() {
        Ok(()) => nix::errno::Errno::UnknownErrno,
        Err(e) => e,
    }
}

fn attach_stopped_child(child: Pid, cfg: &SpawnConfig) -> Result<Tracee> {
    loop {
        match waitpid(child, Some(WaitPidFlag::WUNTRACED)) {
            Ok(WaitStatus::Stopped(_, Signal::SIGSTOP)) => break,
            Ok(WaitStatus::Exited(..)) | Ok(WaitStatus::Signaled(..)) => {
                return Err(Error::SpawnFailed("guest exited before exec".into()))
            }
            Ok(_) | Err(nix::errno::Errno::EINTR) => continue,
            Err(e) => return Err(Error::AttachFailed(format!("waitpid {child}: {e}"))),
        }
    }
    let mut opts: Options = default_options();
    if cfg.trace_fork {
        opts |= Options::PTRACE_O_TRACEFORK;
    }
    let tracee = match Tracee::seize(child.as_raw(), opts) {
        Ok(t) => t,
        Err(e) => {
            let _ = kill(child, Signal::SIGKILL);
            let _ = waitpid(child, None);
            return Err(e);
        }
    };
    kill(child, Signal::SIGCONT).map_err(|e| Error::AttachFailed(format!("SIGCONT: {e}")))?;
    Ok(tracee)
}

struct KillOnDrop {
    pid: i32,
    tracee: Option<Tracee>,
}

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        if let Some(mut t) = self.tracee.take() {
            t.kill();
        } else {
            let _ = kill(Pid::from_raw(self.pid), Signal::SIGKILL);
            let _ = waitpid(Pid::from_raw(self.pid), None);
        }
    }
}

/// Waits until the child has exec'd (status pipe closes) or reports why it
/// could not, pumping ptrace events in between.
fn wait_for_exec(status: &OwnedFd, guard: &mut KillOnDrop) -> Result<()> {
    let deadline = Instant::now() + EXEC_TIMEOUT;
    loop {
        if let Some(t) = guard.tracee.as_mut() {
            if let Err(e) = t.poll_events() {
                return Err(match reported_errno(status) {
                    Some(errno) => Error::SpawnFailed(format!("exec failed: {errno}")),
                    None => Error::SpawnFailed(format!("guest died before exec: {e}")),
                });
            }
        }
        let mut fds = [PollFd::new(status.as_fd(), PollFlags::POLLIN)];
        let wait = if guard.tracee.is_some() { PollTimeout::from(1u8) } else { PollTimeout::from(100u8) };
        match poll(&mut fds, wait) {
            Ok(0) | Err(nix::errno::Errno::EINTR) => {}
            Ok(_) => {
                let mut buf = [0u8; 4];
                // SAFETY: reading into a local buffer.
                let n = unsafe { libc::read(status.as_raw_fd(), buf.as_mut_ptr() as *mut _, 4) };
                if n == 0 {
                    return wait_for_exec_stop(guard, deadline);
                }
                let errno = nix::errno::Errno::from_raw(i32::from_ne_bytes(buf));
                return Err(Error::SpawnFailed(format!("exec failed: {errno}")));
            }
            Err(e) => return Err(Error::SpawnFailed(format!("poll: {e}"))),
        }
        if Instant::now() > deadline {
            return Err(Error::SpawnFailed("timed out waiting for exec".into()));
        }
    }
}

/// The errno the child wrote before exiting, if any.
fn reported_errno(status: &OwnedFd) -> Option<nix::errno::Errno> {
    let mut fds = [PollFd::new(status.as_fd(), PollFlags::POLLIN)];
    if !matches!(poll(&mut fds, PollTimeout::ZERO), Ok(n) if n > 0) {
        return None;
    }
    let mut buf = [0u8; 4];
    // SAFETY: reading into a local buffer.
    let n = unsafe { libc::read(status.as_raw_fd(), buf.as_mut_ptr() as *mut _, 4) };
    (n == 4).then(|| nix::errno::Errno::from_raw(i32::from_ne_bytes(buf)))
}

/// The status pipe closes inside execve; the exec ptrace-stop follows and
/// must be consumed before the guest runs.
fn wait_for_exec_stop(guard: &mut KillOnDrop, deadline: Instant) -> Result<()> {
    let Some(t) = guard.tracee.as_mut() else { return Ok(()) };
    let mut backoff = Duration::from_micros(10);
    while t.exec_count() == 0 {
        t.poll_events().map_err(|e| Error::SpawnFailed(format!("guest died during exec: {e}")))?;
        if Instant::now() > deadline {
            return Err(Error::SpawnFailed("timed out waiting for exec".into()));
        }
        std::thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_millis(1));
    }
    Ok(())
}
