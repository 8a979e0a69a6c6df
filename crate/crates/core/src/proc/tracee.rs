//! Ptrace ownership of one guest thread group.
//!
//! The guest is attached with `PTRACE_SEIZE` and every thread it creates is
//! auto-attached through `PTRACE_O_TRACECLONE`. All waiting is done per known
//! thread id (never `waitpid(-1)`), so several tracees can be driven from one
//! tracer thread without stealing each other's events.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::time::{Duration, Instant};

use log::{debug, trace, warn};
use nix::errno::Errno;
use nix::sys::ptrace::{self, Event, Options};
use nix::sys::signal::{self, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;

use crate::error::{Error, Result};
use crate::proc::mem::MemFile;
use crate::proc::pagemap::PagemapReader;

pub const DEFAULT_QUIESCE_TIMEOUT: Duration = Duration::from_millis(1000);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThreadState {
    Running,
    /// Reported by a clone event; its initial stop has not been seen yet.
    Starting,
    Stopped { pending: Option<Signal> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Exited(i32),
    Signaled(Signal),
}

#[derive(Debug)]
pub struct Tracee {
    pid: i32,
    threads: BTreeMap<i32, ThreadState>,
    exit: Option<ExitStatus>,
    mem: Option<MemFile>,
    pagemap: Option<PagemapReader>,
    pub(crate) gadget: Option<u64>,
    quiesce_timeout: Duration,
    /// Stops of processes forked by the guest, keyed by child pid.
    pub(crate) fork_events: HashMap<i32, Option<WaitStatus>>,
    execs: u32,
}

pub fn default_options() -> Options {
    Options::PTRACE_O_TRACECLONE | Options::PTRACE_O_TRACEEXEC | Options::PTRACE_O_EXITKILL
}

impl Tracee {
    /// Seizes `pid` (a single-threaded process, typically our own stopped
    /// child) without stopping it.
    pub fn seize(pid: i32, options: Options) -> Result<Self> {
        ptrace::seize(Pid::from_raw(pid), options)
            .map_err(|e| Error::AttachFailed(format!("PTRACE_SEIZE {pid}: {e}")))?;
        let mut threads = BTreeMap::new();
        threads.insert(pid, ThreadState::Running);
        Ok(Tracee {
            pid,
            threads,
            exit: None,
            mem: None,
            pagemap: None,
            gadget: None,
            quiesce_timeout: DEFAULT_QUIESCE_TIMEOUT,
            fork_events: HashMap::new(),
            execs: 0,
        })
    }

    pub fn set_options(&self, options: Options) -> Result<()> {
        for &tid in self.threads.keys() {
            ptrace::setoptions(Pid::from_raw(tid), options).map_err(|e| Error::os(tid, "PTRACE_SETOPTIONS", e))?;
        }
        Ok(())
    }

    pub fn set_quiesce_timeout(&mut self, timeout: Duration) {
        self.quiesce_timeout = timeout;
    }

    pub fn pid(&self) -> i32 {
        self.pid
    }

    pub fn tids(&self) -> Vec<i32> {
        self.threads.keys().copied().collect()
    }

    pub fn thread_state(&self, tid: i32) -> Option<ThreadState> {
        self.threads.get(&tid).copied()
    }

    /// Number of successful execs observed since attaching.
    pub fn exec_count(&self) -> u32 {
        self.execs
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.exit
    }

    pub fn is_alive(&self) -> bool {
        self.exit.is_none()
    }

    pub fn is_stopped(&self) -> bool {
        self.exit.is_none() && self.threads.values().all(|s| matches!(s, ThreadState::Stopped { .. }))
    }

    pub fn mem(&mut self) -> Result<&MemFile> {
        if self.mem.is_none() {
            self.mem = Some(MemFile::open(self.pid)?);
        }
        Ok(self.mem.as_ref().unwrap())
    }

    pub fn pagemap(&mut self) -> Result<&mut PagemapReader> {
        if self.pagemap.is_none() {
            self.pagemap = Some(PagemapReader::open(self.pid)?);
        }
        Ok(self.pagemap.as_mut().unwrap())
    }

    fn ensure_alive(&self) -> Result<()> {
        match self.exit {
            Some(_) => Err(Error::ProcessGone(self.pid)),
            None => Ok(()),
        }
    }

    /// Drains pending wait statuses without blocking, resuming any thread
    /// that stopped for reasons other than our own interrupt.
    pub fn poll_events(&mut self) -> Result<()> {
        self.drain(false)?;
        self.ensure_alive()
    }

    fn drain(&mut self, stopping: bool) -> Result<bool> {
        let mut any = false;
        loop {
            let mut progressed = false;
            for tid in self.tids() {
                if matches!(self.threads.get(&tid), Some(ThreadState::Stopped { .. })) {
                    continue;
                }
                match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::WNOHANG | WaitPidFlag::__WALL)) {
                    Ok(WaitStatus::StillAlive) => {}
                    Ok(status) => {
                        self.handle(status, stopping)?;
                        progressed = true;
                    }
                    Err(Errno::ECHILD) => {
                        // Thread vanished without an exit report (e.g. reaped by exec).
                        self.threads.remove(&tid);
                        progressed = true;
                    }
                    Err(Errno::EINTR) => progressed = true,
                    Err(e) => return Err(Error::os(tid, "waitpid", e)),
                }
            }
            any |= progressed;
            if !progressed || self.exit.is_some() {
                return Ok(any);
            }
        }
    }

    fn resume_thread(&mut self, tid: i32, sig: Option<Signal>) -> Result<()> {
        match ptrace::cont(Pid::from_raw(tid), sig) {
            Ok(()) | Err(Errno::ESRCH) => {
                self.threads.insert(tid, ThreadState::Running);
                Ok(())
            }
            Err(e) => Err(Error::os(tid, "PTRACE_CONT", e)),
        }
    }

    pub(crate) fn handle(&mut self, status: WaitStatus, stopping: bool) -> Result<()> {
        trace!("tracee {}: {:?}", self.pid, status);
        match status {
            WaitStatus::Exited(p, code) => self.thread_gone(p.as_raw(), ExitStatus::Exited(code)),
            WaitStatus::Signaled(p, sig, _) => self.thread_gone(p.as_raw(), ExitStatus::Signaled(sig)),
            WaitStatus::Stopped(p, sig) => {
                let tid = p.as_raw();
                if matches!(sig, Signal::SIGSEGV | Signal::SIGBUS | Signal::SIGILL) {
                    log_fault(tid, sig);
                }
                if stopping {
                    self.threads.insert(tid, ThreadState::Stopped { pending: Some(sig) });
                } else {
                    self.resume_thread(tid, Some(sig))?;
                }
            }
            WaitStatus::PtraceEvent(p, _sig, event) => {
                let tid = p.as_raw();
                let ev = event;
                if ev == Event::PTRACE_EVENT_CLONE as i32 {
                    let new = ptrace::getevent(p).map_err(|e| Error::os(tid, "PTRACE_GETEVENTMSG", e))? as i32;
                    debug!("tracee {}: thread {} created", self.pid, new);
                    self.threads.entry(new).or_insert(ThreadState::Starting);
                } else if ev == Event::PTRACE_EVENT_FORK as i32 || ev == Event::PTRACE_EVENT_VFORK as i32 {
                    let child = ptrace::getevent(p).map_err(|e| Error::os(tid, "PTRACE_GETEVENTMSG", e))? as i32;
                    self.fork_events.entry(child).or_insert(None);
                } else if ev == Event::PTRACE_EVENT_EXEC as i32 {
                    // exec from any thread leaves only the leader behind,
                    // with a new address space.
                    self.execs += 1;
                    self.mem = None;
                    self.pagemap = None;
                    self.gadget = None;
                    self.threads.retain(|&t, _| t == self.pid);
                    self.threads.insert(self.pid, ThreadState::Running);
                    if tid != self.pid {
                        return self.resume_thread(self.pid, None);
                    }
                }
                if stopping {
                    self.threads.insert(tid, ThreadState::Stopped { pending: None });
                } else {
                    self.resume_thread(tid, None)?;
                }
            }
            WaitStatus::PtraceSyscall(p) => {
                if stopping {
                    self.threads.insert(p.as_raw(), ThreadState::Stopped { pending: None });
                } else {
                    self.resume_thread(p.as_raw(), None)?;
                }
            }
            WaitStatus::Continued(_) | WaitStatus::StillAlive => {}
        }
        Ok(())
    }

    fn thread_gone(&mut self, tid: i32, status: ExitStatus) {
        self.threads.remove(&tid);
        if tid == self.pid {
            self.exit = Some(status);
            self.threads.clear();
        }
    }

    /// Interrupts every thread and waits until all are in a ptrace-stop.
    pub fn quiesce(&mut self) -> Result<()> {
        self.ensure_alive()?;
        for (&tid, state) in self.threads.iter() {
            if *state == ThreadState::Running {
                match ptrace::interrupt(Pid::from_raw(tid)) {
                    Ok(()) | Err(Errno::ESRCH) => {}
                    Err(e) => return Err(Error::os(tid, "PTRACE_INTERRUPT", e)),
                }
            }
        }
        let deadline = Instant::now() + self.quiesce_timeout;
        let mut backoff = Duration::from_micros(5);
        loop {
            self.drain(true)?;
            self.ensure_alive()?;
            if self.is_stopped() {
                // Threads the kernel knows about but we never saw would be
                // running unsupervised.
                let actual = list_threads(self.pid)?;
                if actual.iter().all(|t| self.threads.contains_key(t)) {
                    return Ok(());
                }
            }
            if Instant::now() >= deadline {
                let running: Vec<_> = self
                    .threads
                    .iter()
                    .filter(|(_, s)| !matches!(s, ThreadState::Stopped { .. }))
                    .map(|(t, _)| *t)
                    .collect();
                return Err(Error::Timeout(format!("threads {running:?} of {} did not stop", self.pid)));
            }
            std::thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_millis(1));
        }
    }

    /// Restarts every stopped thread, delivering signals that arrived while
    /// the guest was quiesced.
    pub fn resume(&mut self) -> Result<()> {
        self.ensure_alive()?;
        let stopped: Vec<(i32, Option<Signal>)> = self
            .threads
            .iter()
            .filter_map(|(t, s)| match s {
                ThreadState::Stopped { pending } => Some((*t, *pending)),
                _ => None,
            })
            .collect();
        for (tid, sig) in stopped {
            self.resume_thread(tid, sig)?;
        }
        Ok(())
    }

    /// Waits (blocking) for the next status of one specific thread, used
    /// while single-stepping an injected syscall.
    pub(crate) fn wait_thread(&mut self, tid: i32) -> Result<WaitStatus> {
        loop {
            match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::__WALL)) {
                Ok(s) => return Ok(s),
                Err(Errno::EINTR) => continue,
                Err(e) => return Err(Error::os(tid, "waitpid", e)),
            }
        }
    }

    pub(crate) fn mark_stopped(&mut self, tid: i32) {
        let pending = match self.threads.get(&tid) {
            Some(ThreadState::Stopped { pending }) => *pending,
            _ => None,
        };
        self.threads.insert(tid, ThreadState::Stopped { pending });
    }

    /// Kills the guest and reaps every thread.
    pub fn kill(&mut self) {
        if self.exit.is_some() {
            return;
        }
        let _ = signal::kill(Pid::from_raw(self.pid), Signal::SIGKILL);
        // A traced leader is only reported after every other thread has
        // been reaped by us, so reap the others first.
        let deadline = Instant::now() + Duration::from_secs(5);
        let mut order: Vec<i32> = self.threads.keys().copied().filter(|&t| t != self.pid).collect();
        order.push(self.pid);
        for tid in order {
            loop {
                match waitpid(Pid::from_raw(tid), Some(WaitPidFlag::__WALL)) {
                    Ok(WaitStatus::Exited(_, c)) if tid == self.pid => self.exit = Some(ExitStatus::Exited(c)),
                    Ok(WaitStatus::Signaled(_, s, _)) if tid == self.pid => self.exit = Some(ExitStatus::Signaled(s)),
                    Ok(WaitStatus::Exited(..) | WaitStatus::Signaled(..)) | Err(Errno::ECHILD) => break,
                    Ok(_) | Err(Errno::EINTR) => {}
                    Err(_) => break,
                }
                if self.exit.is_some() || Instant::now() > deadline {
                    break;
                }
            }
        }
        if self.exit.is_none() {
            self.exit = Some(ExitStatus::Signaled(Signal::SIGKILL));
        }
        self.threads.clear();
    }
}

impl Drop for Tracee {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Thread ids of `pid` from its task directory, sorted with the leader first.
pub fn list_threads(pid: i32) -> Result<Vec<i32>> {
    let entries = fs::read_dir(format!("/proc/{pid}/task")).map_err(|e| Error::io(pid, e))?;
    let mut tids: Vec<i32> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok()))
        .collect();
    if tids.is_empty() {
        return Err(Error::ProcessGone(pid));
    }
    tids.sort_by_key(|&t| (t != pid, t));
    Ok(tids)
}

fn log_fault(tid: i32, sig: Signal) {
    let pid = Pid::from_raw(tid);
    let rip = ptrace::getregs(pid).map(|r| r.rip).unwrap_or(0);
    // SAFETY: reading the union field that every fault signal fills in.
    let addr = ptrace::getsiginfo(pid).map(|i| unsafe { i.si_addr() } as u64).unwrap_or(0);
    warn!("thread {tid}: {sig:?} at rip {rip:#x}, fault address {addr:#x}");
}
