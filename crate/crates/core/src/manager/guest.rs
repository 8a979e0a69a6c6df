//! One supervised guest and its request cycle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::fd::AsFd;
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use nix::errno::Errno;
use nix::poll::{poll, PollFd, PollFlags, PollTimeout};
use nix::sys::signal::{kill, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;
use serde_json::Value;

use super::fork::{check_template, fork_template, ForkedChild};
use super::protocol::{codes, error_envelope, is_error_result, parse_response, RequestEnvelope, DONE_TOKEN};
use super::spawn::{spawn_guest, SpawnConfig};
use super::{FdPolicy, GuestState, ManagerConfig, Mode};
use crate::dirty::{Backend, DirtyTracker};
use crate::error::{Error, Result};
use crate::proc::{capture_thread_registers, list_fds, ThreadRegisters, Tracee};
use crate::restore::{self, RestoreOptions, RestoreReport};
use crate::snapshot::{quiesce, take_snapshot, Snapshot};

const POLL_SLICE_MS: u8 = 2;
const IDLE_WAIT: Duration = Duration::from_millis(50);

/// What happened to one request.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub id: String,
    /// Line for the client, without the newline: the guest's response, or an
    /// error envelope produced by the supervisor.
    pub response: String,
    pub result: Option<Value>,
    /// Restore that had to run before this request could be forwarded.
    pub pre_restore: Option<RestoreReport>,
    pub forwarded_at: Instant,
    pub responded_at: Instant,
    /// Rollback after the response (gh), or tracking inspection (gh-nop).
    pub restore: Option<RestoreReport>,
    pub timed_out: bool,
}

impl Exchange {
    pub fn latency(&self) -> Duration {
        self.responded_at - self.forwarded_at
    }
}

/// Buffered line reader over the guest's stdout.
struct Lines {
    file: File,
    pending: Vec<u8>,
}

enum Wait {
    Line(String),
    Eof,
    TimedOut,
}

impl Lines {
    /// Waits for one line, calling `service` between poll slices.
    fn next(&mut self, deadline: Instant, service: &mut dyn FnMut() -> Result<()>) -> Result<Wait> {
        loop {
            if let Some(nl) = self.pending.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.pending.drain(..=nl).collect();
                return Ok(Wait::Line(String::from_utf8_lossy(&line[..nl]).into_owned()));
            }
            if Instant::now() >= deadline {
                return Ok(Wait::TimedOut);
            }
            service()?;
            let mut fds = [PollFd::new(self.file.as_fd(), PollFlags::POLLIN)];
            match poll(&mut fds, PollTimeout::from(POLL_SLICE_MS)) {
                Ok(0) | Err(Errno::EINTR) => continue,
                Ok(_) => {}
                Err(e) => return Err(Error::Os { op: "poll", errno: e }),
            }
            let mut buf = [0u8; 64 * 1024];
            let n = self.file.read(&mut buf)?;
            if n == 0 {
                return Ok(Wait::Eof);
            }
            self.pending.extend_from_slice(&buf[..n]);
        }
    }

    /// Drops buffered and immediately readable output.
    fn discard(&mut self) {
        self.pending.clear();
        loop {
            let mut fds = [PollFd::new(self.file.as_fd(), PollFlags::POLLIN)];
            if !matches!(poll(&mut fds, PollTimeout::ZERO), Ok(n) if n > 0) {
                return;
            }
            let mut buf = [0u8; 64 * 1024];
            if !matches!(self.file.read(&mut buf), Ok(n) if n > 0) {
                return;
            }
        }
    }
}

pub struct GuestHandle {
    cfg: ManagerConfig,
    pid: i32,
    state: GuestState,
    stdin: File,
    stdout: Lines,
    done: Option<File>,
    tracee: Option<Tracee>,
    tracker: Option<DirtyTracker>,
    snapshot: Option<Snapshot>,
    template_regs: Option<ThreadRegisters>,
    fd_baseline: BTreeMap<i32, PathBuf>,
    last_domain: Option<String>,
    child: Option<ForkedChild>,
    exited: bool,
    stderr_pump: Option<JoinHandle<()>>,
    restores: u64,
    requests: u64,
}

impl GuestHandle {
    /// Spawns the guest; it is attached but not yet warmed up.
    pub fn spawn(cfg: ManagerConfig) -> Result<Self> {
        let mut sc: SpawnConfig = cfg.spawn.clone();
        sc.trace = cfg.mode.traced();
        sc.trace_fork = cfg.mode == Mode::Fork;
        sc.done_channel |= cfg.direct_signal;
        sc.capture_stderr |= cfg.forward_stderr;
        let g = spawn_guest(&sc)?;
        let stderr_pump = match (cfg.forward_stderr, g.stderr) {
            (true, Some(err)) => Some(pump_stderr(g.pid, err)),
            _ => None,
        };
        info!("guest {} started in {} mode", g.pid, cfg.mode);
        Ok(GuestHandle {
            pid: g.pid,
            state: GuestState::Spawned,
            stdin: g.stdin,
            stdout: Lines { file: g.stdout, pending: Vec::new() },
            done: g.done,
            tracee: g.tracee,
            tracker: None,
            snapshot: None,
            template_regs: None,
            fd_baseline: BTreeMap::new(),
            last_domain: None,
            child: None,
            exited: false,
            stderr_pump,
            restores: 0,
            requests: 0,
            cfg,
        })
    }

    /// Spawns and warms up in one step.
    pub fn start(cfg: ManagerConfig, dummy: &RequestEnvelope) -> Result<Self> {
        let mut g = Self::spawn(cfg)?;
        g.warmup(dummy)?;
        Ok(g)
    }

    pub fn pid(&self) -> i32 {
        self.pid
    }

    pub fn state(&self) -> GuestState {
        self.state
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    pub fn tracee(&mut self) -> Option<&mut Tracee> {
        self.tracee.as_mut()
    }

    pub fn restores(&self) -> u64 {
        self.restores
    }

    pub fn requests(&self) -> u64 {
        self.requests
    }

    fn become_(&mut self, to: GuestState) -> Result<()> {
        if !self.state.can_become(to) {
            return Err(Error::IllegalTransition { from: self.state, to });
        }
        debug!("guest {}: {:?} -> {:?}", self.pid, self.state, to);
        self.state = to;
        Ok(())
    }

    /// Runs the dummy request and captures the warm state.
    pub fn warmup(&mut self, dummy: &RequestEnvelope) -> Result<Value> {
        self.become_(GuestState::Warming)?;
        match self.warmup_inner(dummy) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.die();
                Err(e)
            }
        }
    }

    fn warmup_inner(&mut self, dummy: &RequestEnvelope) -> Result<Value> {
        let deadline = Instant::now() + self.cfg.timeout;
        self.send(&dummy.payload)?;
        let line = match self.read_line(deadline)? {
            Some(l) => l,
            None => return Err(Error::Timeout(format!("warm-up response after {:?}", self.cfg.timeout))),
        };
        let result = parse_response(&line, &dummy.activation_id).map_err(Error::GuestError)?;
        if is_error_result(&result) {
            return Err(Error::GuestError(format!("warm-up request failed: {result}")));
        }
        if self.cfg.direct_signal {
            self.wait_done(deadline)?;
        }
        self.wait_idle();

        match self.cfg.mode {
            Mode::Base => {}
            Mode::Gh | Mode::GhNop => {
                let tracee = self.tracee.as_mut().expect("traced mode");
                quiesce(tracee)?;
                let backend = match self.cfg.backend {
                    Some(b) => b,
                    None => Backend::detect()?,
                };
                let mut tracker = DirtyTracker::with_backend(backend);
                let snap = take_snapshot(tracee, &mut tracker, &self.cfg.snapshot)?;
                self.fd_baseline = list_fds(self.pid)?;
                tracee.resume()?;
                info!(
                    "guest {}: snapshot of {} pages ({} bytes) in {:?}, tracking with {}",
                    self.pid,
                    snap.present_pages(),
                    snap.byte_size,
                    snap.capture_duration,
                    backend.name()
                );
                self.tracker = Some(tracker);
                self.snapshot = Some(snap);
            }
            Mode::Fork => {
                let tracee = self.tracee.as_mut().expect("traced mode");
                quiesce(tracee)?;
                check_template(self.pid)?;
                self.template_regs = Some(capture_thread_registers(self.pid)?);
            }
        }
        self.become_(GuestState::Clean)?;
        Ok(result)
    }

    /// Forwards one request once the guest is clean, hands the response to
    /// `on_response`, then rolls the guest back.
    pub fn handle_request(&mut self, req: &RequestEnvelope, on_response: impl FnOnce(&Exchange)) -> Result<Exchange> {
        if self.state == GuestState::Dead {
            return Err(Error::ContainerLost(format!("guest {} is dead", self.pid)));
        }
        let pre_restore = self.prepare(req)?;
        self.become_(GuestState::Executing)?;
        self.requests += 1;

        let forwarded_at = Instant::now();
        let deadline = forwarded_at + self.cfg.timeout;
        let outcome = self.execute(req, deadline);
        let responded_at = Instant::now();
        let mut ex = Exchange {
            id: req.activation_id.clone(),
            response: String::new(),
            result: None,
            pre_restore,
            forwarded_at,
            responded_at,
            restore: None,
            timed_out: false,
        };

        match outcome {
            Ok(Some((line, result))) => {
                ex.response = line;
                ex.result = Some(result);
                self.become_(GuestState::Responded)?;
                on_response(&ex);
                self.last_domain = req.domain.clone();
                ex.restore = self.settle(req)?;
                Ok(ex)
            }
            Ok(None) => {
                ex.timed_out = true;
                ex.response = error_envelope(
                    &req.activation_id,
                    codes::TIMEOUT,
                    &format!("no response within {}s", self.cfg.timeout.as_secs_f64()),
                );
                self.last_domain = None;
                match self.cfg.mode {
                    Mode::Gh => {
                        on_response(&ex);
                        ex.restore = Some(self.rollback()?);
                        self.stdout.discard();
                        Ok(ex)
                    }
                    Mode::Fork => {
                        if let Some(mut c) = self.child.take() {
                            c.kill();
                        }
                        self.stdout.discard();
                        self.become_(GuestState::Responded)?;
                        self.become_(GuestState::Clean)?;
                        on_response(&ex);
                        Ok(ex)
                    }
                    Mode::Base | Mode::GhNop => {
                        self.die();
                        on_response(&ex);
                        Err(Error::Timeout(format!("request {} timed out; guest killed", req.activation_id)))
                    }
                }
            }
            Err(e) => {
                ex.response = error_envelope(&req.activation_id, codes::CONTAINER_LOST, &e.to_string());
                self.die();
                on_response(&ex);
                Err(match e {
                    e @ (Error::ContainerLost(_) | Error::GuestDiverged(_)) => e,
                    e => Error::ContainerLost(e.to_string()),
                })
            }
        }
    }

    /// Brings a guest left dirty by the previous request back to clean,
    /// unless the previous request came from the same domain.
    fn prepare(&mut self, req: &RequestEnvelope) -> Result<Option<RestoreReport>> {
        if self.state != GuestState::Responded {
            return Ok(None);
        }
        if self.cfg.skip_same_domain && req.domain.is_some() && req.domain == self.last_domain {
            debug!("guest {}: same domain {:?}, rollback skipped", self.pid, req.domain);
            self.become_(GuestState::Clean)?;
            return Ok(None);
        }
        self.rollback().map(Some)
    }

    fn execute(&mut self, req: &RequestEnvelope, deadline: Instant) -> Result<Option<(String, Value)>> {
        if self.cfg.mode == Mode::Fork {
            let regs = self.template_regs.as_ref().expect("fork template");
            let tracee = self.tracee.as_mut().expect("traced mode");
            self.child = Some(fork_template(tracee, regs)?);
        }
        self.send(&req.payload)?;
        let Some(line) = self.read_line(deadline)? else { return Ok(None) };
        let result = parse_response(&line, &req.activation_id)
            .map_err(|e| Error::ContainerLost(format!("protocol error: {e}")))?;
        if self.cfg.direct_signal && !self.wait_done(deadline)? {
            return Ok(None);
        }
        Ok(Some((line, result)))
    }

    /// Post-response work for the mode.
    fn settle(&mut self, req: &RequestEnvelope) -> Result<Option<RestoreReport>> {
        let r = match self.cfg.mode {
            Mode::Base => {
                self.become_(GuestState::Clean)?;
                None
            }
            Mode::Fork => {
                if let Some(mut c) = self.child.take() {
                    c.kill();
                }
                self.become_(GuestState::Clean)?;
                None
            }
            Mode::GhNop => {
                let r = self.guard(Self::inspect_and_reset)?;
                self.become_(GuestState::Clean)?;
                Some(r)
            }
            Mode::Gh if self.cfg.skip_same_domain && req.domain.is_some() => None,
            Mode::Gh => Some(self.rollback()?),
        };
        Ok(r)
    }

    /// Responded or Executing -> Restoring -> Clean.
    fn rollback(&mut self) -> Result<RestoreReport> {
        self.become_(GuestState::Restoring)?;
        let report = self.guard(Self::restore_now)?;
        self.become_(GuestState::Clean)?;
        Ok(report)
    }

    fn restore_now(&mut self) -> Result<RestoreReport> {
        let opts = RestoreOptions { resume: true, ..self.cfg.restore.clone() };
        let tracee = self.tracee.as_mut().expect("traced mode");
        let snap = self.snapshot.as_ref().expect("snapshot");
        let tracker = self.tracker.as_mut().expect("tracker");
        let report = restore::restore(tracee, snap, tracker, &opts)?;
        self.restores += 1;
        self.check_fds()?;
        Ok(report)
    }

    fn inspect_and_reset(&mut self) -> Result<RestoreReport> {
        let tracee = self.tracee.as_mut().expect("traced mode");
        let snap = self.snapshot.as_ref().expect("snapshot");
        let tracker = self.tracker.as_mut().expect("tracker");
        let (report, _) = restore::inspect(tracee, snap, tracker, false)?;
        let current = crate::proc::read_memory_layout(self.pid)?;
        tracker.rearm(tracee, &current)?;
        tracee.resume()?;
        Ok(report)
    }

    /// Runs `f`, killing the guest if it fails in a way that leaves it untrustworthy.
    fn guard<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        f(self).inspect_err(|e| {
            warn!("guest {}: {e}; tearing down", self.pid);
            self.die();
        })
    }

    fn check_fds(&mut self) -> Result<()> {
        let now = list_fds(self.pid)?;
        let added: Vec<String> = now
            .iter()
            .filter(|(fd, _)| !self.fd_baseline.contains_key(fd))
            .map(|(fd, p)| format!("{fd} -> {}", p.display()))
            .collect();
        if added.is_empty() {
            return Ok(());
        }
        match self.cfg.fd_policy {
            FdPolicy::Strict => Err(Error::GuestDiverged(format!("new file descriptors: {}", added.join(", ")))),
            FdPolicy::Permissive => {
                warn!("guest {}: new file descriptors kept open: {}", self.pid, added.join(", "));
                Ok(())
            }
        }
    }

    fn send(&mut self, payload: &str) -> Result<()> {
        let mut line = Vec::with_capacity(payload.len() + 1);
        line.extend_from_slice(payload.as_bytes());
        line.push(b'\n');
        self.stdin
            .write_all(&line)
            .map_err(|e| Error::ContainerLost(format!("writing to guest {}: {e}", self.pid)))
    }

    /// Next stdout line, or `None` on timeout. EOF or guest death is
    /// `ContainerLost`.
    fn read_line(&mut self, deadline: Instant) -> Result<Option<String>> {
        let pid = self.pid;
        let tracee = &mut self.tracee;
        let child = &mut self.child;
        let exited = &mut self.exited;
        let mut service = || -> Result<()> {
            if let Some(c) = child.as_mut() {
                if c.poll_exit()? {
                    return Err(Error::ContainerLost(format!("forked copy {} exited", c.pid)));
                }
                return Ok(());
            }
            match tracee.as_mut() {
                Some(t) => t.poll_events().map_err(|e| Error::ContainerLost(format!("guest {pid}: {e}"))),
                None if !*exited && reap_untraced(pid)? => {
                    *exited = true;
                    Err(Error::ContainerLost(format!("guest {pid} exited")))
                }
                None => Ok(()),
            }
        };
        match self.stdout.next(deadline, &mut service)? {
            Wait::Line(l) => Ok(Some(l)),
            Wait::TimedOut => Ok(None),
            Wait::Eof => Err(Error::ContainerLost(format!("guest {pid} closed its stdout"))),
        }
    }

    /// Waits for the DONE byte on the completion channel.
    fn wait_done(&mut self, deadline: Instant) -> Result<bool> {
        let Some(done) = self.done.as_mut() else {
            return Err(Error::Config("direct signaling needs a completion channel".into()));
        };
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(false);
            }
            let ms = left.as_millis().min(i32::MAX as u128) as i32;
            let mut fds = [PollFd::new(done.as_fd(), PollFlags::POLLIN)];
            match poll(&mut fds, PollTimeout::try_from(ms).unwrap_or(PollTimeout::MAX)) {
                Ok(0) | Err(Errno::EINTR) => continue,
                Ok(_) => {}
                Err(e) => return Err(Error::Os { op: "poll", errno: e }),
            }
            let mut b = [0u8; 1];
            match done.read(&mut b)? {
                0 => return Err(Error::ContainerLost("completion channel closed".into())),
                _ if b[0] == DONE_TOKEN => return Ok(true),
                _ => warn!("guest {}: unexpected byte {:#x} on completion channel", self.pid, b[0]),
            }
        }
    }

    /// Gives the guest a moment to get back to its blocking read, so the
    /// snapshot does not catch it mid-loop.
    fn wait_idle(&mut self) {
        let until = Instant::now() + IDLE_WAIT;
        while Instant::now() < until {
            if let Some(t) = self.tracee.as_mut() {
                let _ = t.poll_events();
            }
            if all_threads_sleeping(self.pid) {
                return;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        debug!("guest {}: not idle after {:?}; snapshotting anyway", self.pid, IDLE_WAIT);
    }

    fn die(&mut self) {
        if let Some(mut c) = self.child.take() {
            c.kill();
        }
        match self.tracee.as_mut() {
            Some(t) => t.kill(),
            None if !self.exited => {
                let _ = kill(Pid::from_raw(self.pid), Signal::SIGKILL);
                let _ = waitpid(Pid::from_raw(self.pid), None);
                self.exited = true;
            }
            None => {}
        }
        self.state = GuestState::Dead;
    }

    /// Closes the guest's stdin and waits briefly for it to exit, then kills it.
    pub fn shutdown(mut self) -> Result<()> {
        if let Some(mut c) = self.child.take() {
            c.kill();
        }
        self.die();
        if let Some(h) = self.stderr_pump.take() {
            let _ = h.join();
        }
        Ok(())
    }
}

impl Drop for GuestHandle {
    fn drop(&mut self) {
        if self.state != GuestState::Dead {
            self.die();
        }
    }
}

fn reap_untraced(pid: i32) -> Result<bool> {
    match waitpid(Pid::from_raw(pid), Some(WaitPidFlag::WNOHANG)) {
        Ok(WaitStatus::Exited(..) | WaitStatus::Signaled(..)) | Err(Errno::ECHILD) => Ok(true),
        Ok(_) | Err(Errno::EINTR) => Ok(false),
        Err(e) => Err(Error::os(pid, "waitpid", e)),
    }
}

fn all_threads_sleeping(pid: i32) -> bool {
    let Ok(dir) = std::fs::read_dir(format!("/proc/{pid}/task")) else { return false };
    dir.filter_map(|e| e.ok()).all(|e| {
        std::fs::read_to_string(e.path().join("stat"))
            .ok()
            .and_then(|s| s.rsplit_once(')').and_then(|(_, rest)| rest.split_whitespace().next().map(str::to_owned)))
            .is_some_and(|state| state == "S" || state == "t")
    })
}

fn pump_stderr(pid: i32, err: File) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let mut out = std::io::stderr();
        for line in BufReader::new(err).split(b'\n') {
            let Ok(line) = line else { break };
            let mut buf = format!("[{pid}] ").into_bytes();
            buf.extend_from_slice(&line);
            buf.push(b'\n');
            let _ = out.write_all(&buf);
        }
    })
}
