#![allow(dead_code)]

pub mod oracle;

use std::io::{Read, Write};
use std::os::fd::AsFd;
use std::time::{Duration, Instant};

use nix::poll::{poll, PollFd, PollFlags, PollTimeout};

use rewind::manager::spawn::{spawn_guest, SpawnConfig, SpawnedGuest};
use rand::Rng;
use serde_json::{json, Value};

pub const REFGUEST: &str = env!("CARGO_BIN_EXE_refguest");
pub const SUPERVISOR: &str = env!("CARGO_BIN_EXE_supervisor");

/// A reference guest driven directly over its pipes.
pub struct Guest {
    pub spawned: SpawnedGuest,
    pending: Vec<u8>,
    next_id: u64,
}

impl Guest {
    pub fn start(args: &[&str]) -> Guest {
        Self::start_with(args, |_| {})
    }

    pub fn start_with(args: &[&str], tweak: impl FnOnce(&mut SpawnConfig)) -> Guest {
        let mut cfg = SpawnConfig::new(REFGUEST, args.iter().map(|s| s.to_string()).collect());
        tweak(&mut cfg);
        let spawned = spawn_guest(&cfg).expect("spawn refguest");
        Guest { spawned, pending: Vec::new(), next_id: 0 }
    }

    pub fn pid(&self) -> i32 {
        self.spawned.pid
    }

    pub fn tracee(&mut self) -> &mut rewind::proc::Tracee {
        self.spawned.tracee.as_mut().expect("traced guest")
    }

    /// Sends one command and waits for its result.
    pub fn call(&mut self, value: Value) -> Value {
        self.next_id += 1;
        let id = format!("t{}", self.next_id);
        let line = serde_json::json!({"id": id, "value": value}).to_string();
        self.spawned.stdin.write_all(line.as_bytes()).unwrap();
        self.spawned.stdin.write_all(b"\n").unwrap();
        let resp = self.read_line(Duration::from_secs(60));
        let v: Value = serde_json::from_str(&resp).expect("json response");
        assert_eq!(v["id"], Value::String(id));
        v["result"].clone()
    }

    /// Reads one stdout line, servicing ptrace stops while waiting.
    pub fn read_line(&mut self, timeout: Duration) -> String {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(nl) = self.pending.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.pending.drain(..=nl).collect();
                return String::from_utf8(line).unwrap();
            }
            assert!(Instant::now() < deadline, "no response from guest");
            if let Some(t) = self.spawned.tracee.as_mut() {
                t.poll_events().expect("guest alive");
            }
            let mut fds = [PollFd::new(self.spawned.stdout.as_fd(), PollFlags::POLLIN)];
            if poll(&mut fds, PollTimeout::from(5u8)).unwrap() == 0 {
                continue;
            }
            let mut buf = [0u8; 65536];
            let n = self.spawned.stdout.read(&mut buf).unwrap();
            if n == 0 {
                std::thread::sleep(Duration::from_millis(20));
                let status = self.spawned.tracee.as_mut().map(|t| {
                    let _ = t.poll_events();
                    t.exit_status()
                });
                panic!("guest closed stdout, exit status {status:?}");
            }
            self.pending.extend_from_slice(&buf[..n]);
        }
    }
}

/// Addresses the reference guest reports about itself.
#[derive(Clone, Debug)]
pub struct GuestInfo {
    pub arena: u64,
    pub arena_pages: u64,
    pub spare_unmap: u64,
    pub spare_protect: u64,
    pub spare_file: u64,
}

impl GuestInfo {
    pub fn of(g: &mut Guest) -> GuestInfo {
        let v = g.call(json!({"op": "info"}));
        let n = |k: &str| v[k].as_u64().unwrap();
        let a = |k: &str| v[k]["addr"].as_u64().unwrap();
        GuestInfo {
            arena: n("arena"),
            arena_pages: n("arena_pages"),
            spare_unmap: a("spare_unmap"),
            spare_protect: a("spare_protect"),
            spare_file: a("spare_file"),
        }
    }
}

/// Drives the guest through one to four random state changes: page writes,
/// new mappings, unmapped and reprotected regions, heap growth, leaks.
pub fn random_mutation(g: &mut Guest, info: &GuestInfo, rng: &mut impl Rng) -> Vec<Value> {
    let ps = 4096u64;
    let mut sent = Vec::new();
    // Arena pages unmapped earlier in this cycle must not be written.
    let mut holes: Vec<u64> = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let cmd = match rng.gen_range(0..10) {
            0 | 1 => {
                let k = rng.gen_range(0..=32usize);
                let pages: Vec<u64> = (0..k)
                    .map(|_| rng.gen_range(0..info.arena_pages))
                    .filter(|p| !holes.contains(p))
                    .collect();
                json!({"op": "write_pages", "pages": pages})
            }
            2 => json!({"op": "mmap", "pages": rng.gen_range(1..8), "prot": pick(rng, &["rw", "r", "-"])}),
            3 => json!({"op": "munmap", "addr": info.spare_unmap}),
            4 => json!({"op": "mprotect", "addr": info.spare_protect, "prot": pick(rng, &["r", "-", "rx"])}),
            5 => json!({"op": "brk_grow", "pages": rng.gen_range(1..48)}),
            6 => json!({"op": "leak", "bytes": rng.gen_range(1..400_000)}),
            7 => {
                let first = rng.gen_range(0..info.arena_pages - 2);
                holes.extend([first, first + 1]);
                json!({"op": "munmap", "addr": info.arena + first * ps, "pages": 2})
            }
            8 => json!({"op": "munmap", "addr": info.spare_file}),
            _ => json!({"op": "store_secret", "token": format!("tok-{}", rng.gen::<u64>())}),
        };
        g.call(cmd.clone());
        sent.push(cmd);
    }
    sent
}

fn pick<'a>(rng: &mut impl Rng, from: &[&'a str]) -> &'a str {
    from[rng.gen_range(0..from.len())]
}

/// A guest under an in-process manager, with generated request ids.
pub struct Managed {
    pub handle: rewind::manager::GuestHandle,
    next_id: u64,
}

pub fn manager_config(mode: rewind::manager::Mode, args: &[&str]) -> rewind::manager::ManagerConfig {
    let spawn = SpawnConfig::new(REFGUEST, args.iter().map(|s| s.to_string()).collect());
    let mut cfg = rewind::manager::ManagerConfig::new(mode, spawn);
    cfg.forward_stderr = false;
    cfg
}

impl Managed {
    pub fn start(cfg: rewind::manager::ManagerConfig) -> Managed {
        let dummy = rewind::manager::RequestEnvelope::dummy(r#"{"op":"bench","dirty":0}"#).unwrap();
        let handle = rewind::manager::GuestHandle::start(cfg, &dummy).expect("warm-up");
        Managed { handle, next_id: 0 }
    }

    pub fn envelope(&mut self, value: Value, domain: Option<&str>) -> rewind::manager::RequestEnvelope {
        self.next_id += 1;
        rewind::manager::RequestEnvelope::new(format!("r{}", self.next_id), value, domain.map(str::to_owned), Instant::now())
    }

    pub fn exchange(&mut self, value: Value, domain: Option<&str>) -> rewind::Result<rewind::manager::Exchange> {
        let req = self.envelope(value, domain);
        self.handle.handle_request(&req, |_| {})
    }

    /// Sends one command and returns its result.
    pub fn ask(&mut self, value: Value) -> Value {
        self.exchange(value, None).expect("request").result.expect("result")
    }
}
