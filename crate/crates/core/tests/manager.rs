mod common;

use std::time::Duration;

use common::{manager_config, Managed};
use rewind::manager::{FdPolicy, GuestState, Mode};
use rewind::Error;
use serde_json::{json, Value};

fn secret_survives(mode: Mode) -> bool {
    let mut g = Managed::start(manager_config(mode, &["--arena-pages", "64"]));
    let token = format!("R1-{:032x}", rand::random::<u128>());
    assert_eq!(g.ask(json!({"op": "store_secret", "token": token}))["stored"], token.len());
    g.ask(json!({"op": "find_secret", "token": token}))["found"].as_bool().unwrap()
}

#[test]
fn secrets_are_only_isolated_by_rollback_modes() {
    assert!(secret_survives(Mode::Base));
    assert!(secret_survives(Mode::GhNop));
    assert!(!secret_survives(Mode::Gh));
    assert!(!secret_survives(Mode::Fork));
}

#[test]
fn snapshot_epoch_is_one_after_warmup() {
    let g = Managed::start(manager_config(Mode::Gh, &[]));
    let snap = g.handle.snapshot().unwrap();
    assert_eq!(snap.epoch, 1);
    // Idle between requests: blocked reading stdin.
    assert_eq!(snap.interrupted, vec![(g.handle.pid(), libc::SYS_read as u64)]);
    assert_eq!(g.handle.state(), GuestState::Clean);
}

#[test]
fn same_domain_skips_rollback_until_the_domain_changes() {
    let mut cfg = manager_config(Mode::Gh, &["--arena-pages", "64"]);
    cfg.skip_same_domain = true;
    let mut g = Managed::start(cfg);
    let token = "alice-secret-0001";
    let ex = g.exchange(json!({"op": "store_secret", "token": token}), Some("alice")).unwrap();
    assert!(ex.restore.is_none());
    assert_eq!(g.handle.state(), GuestState::Responded);

    let ex = g.exchange(json!({"op": "find_secret", "token": token}), Some("alice")).unwrap();
    assert!(ex.pre_restore.is_none());
    assert_eq!(ex.result.unwrap()["found"], true);
    assert_eq!(g.handle.restores(), 0);

    let ex = g.exchange(json!({"op": "find_secret", "token": token}), Some("bob")).unwrap();
    assert!(ex.pre_restore.is_some());
    assert_eq!(ex.result.unwrap()["found"], false);
    assert_eq!(g.handle.restores(), 1);

    // Requests without a domain never share state.
    let ex = g.exchange(json!({"op": "echo"}), None).unwrap();
    assert!(ex.pre_restore.is_some());
    assert!(ex.restore.is_some());
}

#[test]
fn fork_mode_rejects_multithreaded_guests() {
    let dummy = rewind::manager::RequestEnvelope::dummy("1").unwrap();
    let cfg = manager_config(Mode::Fork, &["--background-thread"]);
    match rewind::manager::GuestHandle::start(cfg, &dummy) {
        Err(Error::ModeUnsupported(_)) => {}
        other => panic!("expected ModeUnsupported, got {:?}", other.map(|g| g.pid())),
    }
}

#[test]
fn multithreaded_guest_is_restored_in_gh_mode() {
    let mut g = Managed::start(manager_config(Mode::Gh, &["--background-thread"]));
    assert_eq!(g.handle.snapshot().unwrap().threads.len(), 2);
    for i in 0..5 {
        let v = g.ask(json!({"op": "info"}));
        assert_eq!(v["threads"], 2, "request {i}");
        g.ask(json!({"op": "write_pages", "pages": [1, 2, 3]}));
    }
}

#[test]
fn new_descriptors_are_fatal_under_strict_policy() {
    let mut g = Managed::start(manager_config(Mode::Gh, &[]));
    match g.exchange(json!({"op": "open_file"}), None) {
        Err(Error::GuestDiverged(msg)) => assert!(msg.contains("/dev/null"), "{msg}"),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(g.handle.state(), GuestState::Dead);
    assert!(matches!(g.exchange(json!(1), None), Err(Error::ContainerLost(_))));
}

#[test]
fn new_descriptors_are_tolerated_under_permissive_policy() {
    let mut cfg = manager_config(Mode::Gh, &[]);
    cfg.fd_policy = FdPolicy::Permissive;
    let mut g = Managed::start(cfg);
    g.ask(json!({"op": "open_file"}));
    assert_eq!(g.ask(json!({"op": "echo", "n": 2}))["n"], 2);
}

fn rss_trend(mode: Mode) -> (u64, u64) {
    let mut g = Managed::start(manager_config(mode, &["--arena-pages", "16"]));
    let rss: Vec<u64> = (0..20)
        .map(|_| g.ask(json!({"op": "leak", "bytes": 1 << 20}))["rss_kb"].as_u64().unwrap())
        .collect();
    (rss[2], rss[19])
}

#[test]
fn leaks_are_rolled_back() {
    let (first, last) = rss_trend(Mode::Gh);
    assert!(last <= first + 256, "gh rss grew from {first} to {last} kB");
    let (first, last) = rss_trend(Mode::Base);
    assert!(last >= first + 16 * 1024, "base rss only grew from {first} to {last} kB");
}

#[test]
fn timed_out_request_is_rolled_back_in_gh_mode() {
    let mut cfg = manager_config(Mode::Gh, &[]);
    cfg.timeout = Duration::from_millis(300);
    let mut g = Managed::start(cfg);
    let ex = g.exchange(json!({"op": "work", "ms": 2000}), None).unwrap();
    assert!(ex.timed_out);
    let v: Value = serde_json::from_str(&ex.response).unwrap();
    assert_eq!(v["error"]["code"], 504);
    assert_eq!(g.ask(json!({"op": "echo", "k": 7}))["k"], 7);
}

#[test]
fn timed_out_request_kills_a_base_guest() {
    let mut cfg = manager_config(Mode::Base, &[]);
    cfg.timeout = Duration::from_millis(200);
    let mut g = Managed::start(cfg);
    assert!(matches!(g.exchange(json!({"op": "work", "ms": 2000}), None), Err(Error::Timeout(_))));
    assert_eq!(g.handle.state(), GuestState::Dead);
}

#[test]
fn timed_out_fork_copy_is_discarded() {
    let mut cfg = manager_config(Mode::Fork, &[]);
    cfg.timeout = Duration::from_millis(300);
    let mut g = Managed::start(cfg);
    assert!(g.exchange(json!({"op": "work", "ms": 2000}), None).unwrap().timed_out);
    assert_eq!(g.ask(json!({"op": "echo", "k": 8}))["k"], 8);
}

#[test]
fn crashing_guest_is_lost() {
    for mode in [Mode::Base, Mode::Gh, Mode::Fork] {
        let mut g = Managed::start(manager_config(mode, &[]));
        let mut answered = None;
        let req = g.envelope(json!({"op": "crash"}), None);
        let r = g.handle.handle_request(&req, |ex| answered = Some(ex.response.clone()));
        assert!(matches!(r, Err(Error::ContainerLost(_))), "{mode}: {r:?}");
        let v: Value = serde_json::from_str(&answered.unwrap()).unwrap();
        assert_eq!(v["error"]["code"], 502);
    }
}

#[test]
fn gh_nop_answers_like_base() {
    let script = [
        json!({"op": "bench", "dirty": 5}),
        json!({"op": "write_pages", "pages": [3, 4]}),
        json!({"op": "bench", "dirty": 0}),
        json!({"op": "echo", "s": "x"}),
        json!({"op": "brk_grow", "pages": 2}),
        json!({"op": "report_writes"}),
    ];
    let run = |mode| {
        let mut g = Managed::start(manager_config(mode, &["--arena-pages", "32"]));
        script
            .iter()
            .map(|c| {
                let mut r = g.ask(c.clone());
                // heap addresses and heartbeat stamps are per-process
                for k in ["old", "new", "sum", "arena", "pages"] {
                    r.as_object_mut().map(|m| m.remove(k));
                }
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(Mode::GhNop), run(Mode::Base));
}

#[test]
fn gh_nop_measures_without_restoring() {
    let mut g = Managed::start(manager_config(Mode::GhNop, &["--arena-pages", "64"]));
    let ex = g.exchange(json!({"op": "write_pages", "pages": [1, 2, 3, 4]}), None).unwrap();
    let r = ex.restore.unwrap();
    assert!(r.dirty_pages >= 4);
    assert_eq!(r.pages_restored, 0);
    assert_eq!(g.handle.restores(), 0);
}

#[test]
fn failing_warmup_is_a_startup_error() {
    let dummy = rewind::manager::RequestEnvelope::dummy(r#"{"op":"fail"}"#).unwrap();
    let r = rewind::manager::GuestHandle::start(manager_config(Mode::Gh, &[]), &dummy);
    assert!(matches!(r, Err(Error::GuestError(_))));
}

#[test]
fn direct_signaling_waits_for_the_done_byte() {
    let mut cfg = manager_config(Mode::Gh, &["--done-fd"]);
    cfg.direct_signal = true;
    let mut g = Managed::start(cfg);
    for i in 0..5 {
        assert_eq!(g.ask(json!({"op": "echo", "i": i}))["i"], i);
    }
}

#[test]
fn guest_runs_as_requested_uid() {
    // The build directory may not be searchable by other users.
    let dir = tempfile::tempdir().unwrap();
    std::fs::set_permissions(dir.path(), std::os::unix::fs::PermissionsExt::from_mode(0o755)).unwrap();
    let exe = dir.path().join("refguest");
    std::fs::copy(common::REFGUEST, &exe).unwrap();
    let mut cfg = manager_config(Mode::Gh, &[]);
    cfg.spawn.program = exe;
    cfg.spawn.run_as_uid = Some(65534);
    let mut g = Managed::start(cfg);
    assert_eq!(g.ask(json!({"op": "info"}))["uid"], 65534);
    assert_ne!(nix::unistd::getuid().as_raw(), 65534);
}

#[test]
fn unreadable_program_fails_to_spawn() {
    let dummy = rewind::manager::RequestEnvelope::dummy("1").unwrap();
    let mut cfg = manager_config(Mode::Gh, &[]);
    cfg.spawn.program = "/nonexistent/guest".into();
    let r = rewind::manager::GuestHandle::start(cfg, &dummy);
    assert!(matches!(r, Err(Error::SpawnFailed(_))));
}
