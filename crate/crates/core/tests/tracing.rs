mod common;

use common::Guest;
use rewind::proc::{list_threads, read_memory_layout, capture_thread_registers, set_thread_registers};
use rewind::restore::inject::{inject_syscall, nr, Expect, SyscallRequest};
use serde_json::json;

#[test]
fn injected_getpid_returns_guest_pid() {
    let mut g = Guest::start(&["--arena-pages", "16"]);
    g.call(json!({"op": "info"}));
    let pid = g.pid();
    let t = g.tracee();
    t.quiesce().unwrap();
    let before = capture_thread_registers(pid).unwrap();
    let ret = inject_syscall(t, pid, &SyscallRequest::new(nr::GETPID, &[]).expect(Expect::Equals(pid as u64))).unwrap();
    assert_eq!(ret, pid as u64);
    assert_eq!(capture_thread_registers(pid).unwrap(), before);
    t.resume().unwrap();
    assert_eq!(g.call(json!({"op": "info"}))["pid"], json!(pid));
}

#[test]
fn register_round_trip() {
    let mut g = Guest::start(&[]);
    let pid = g.pid();
    let t = g.tracee();
    t.quiesce().unwrap();
    let a = capture_thread_registers(pid).unwrap();
    set_thread_registers(pid, &a).unwrap();
    assert_eq!(capture_thread_registers(pid).unwrap(), a);
    t.resume().unwrap();
}

#[test]
fn threads_are_listed_leader_first() {
    let mut g = Guest::start(&[]);
    assert_eq!(list_threads(g.pid()).unwrap(), vec![g.pid()]);
    g.call(json!({"op": "spawn_thread"}));
    let tids = list_threads(g.pid()).unwrap();
    assert_eq!(tids.len(), 2);
    assert_eq!(tids[0], g.pid());
    let t = g.tracee();
    t.quiesce().unwrap();
    assert_eq!(t.tids().len(), 2);
    t.resume().unwrap();
}

#[test]
fn new_mapping_shows_up_in_layout() {
    let mut g = Guest::start(&[]);
    let pid = g.pid();
    g.call(json!({"op": "info"}));
    g.tracee().quiesce().unwrap();
    let before = read_memory_layout(pid).unwrap();
    g.tracee().resume().unwrap();
    let addr = g.call(json!({"op": "mmap", "pages": 1, "prot": "r"}))["addr"].as_u64().unwrap();
    g.tracee().quiesce().unwrap();
    let after = read_memory_layout(pid).unwrap();
    assert_eq!(after.regions.len(), before.regions.len() + 1);
    let r = after.region_containing(addr).unwrap();
    assert_eq!((r.start, r.page_count()), (addr, 1));
    g.tracee().resume().unwrap();
}
