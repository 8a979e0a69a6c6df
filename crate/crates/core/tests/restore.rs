mod common;

use common::oracle::{capture, difference};
use common::{random_mutation, Guest, GuestInfo};
use rand::{rngs::StdRng, SeedableRng};
use rewind::dirty::DirtyTracker;
use rewind::restore::{pending_delta, restore, RestoreOptions, RestoreOrder};
use rewind::snapshot::{take_snapshot, SnapshotPolicy};
use serde_json::json;

fn fidelity_cycles(order: RestoreOrder, zero_full_stack: bool, cycles: usize, seed: u64) {
    let mut g = Guest::start(&["--arena-pages", "256"]);
    let info = GuestInfo::of(&mut g);
    let mut tracker = DirtyTracker::new().unwrap();
    let t = g.tracee();
    t.quiesce().unwrap();
    let snap = take_snapshot(t, &mut tracker, &SnapshotPolicy::default()).unwrap();
    assert_eq!(snap.epoch, 1);
    let want = capture(t);
    t.resume().unwrap();

    let opts = RestoreOptions { order, zero_full_stack, resume: false };
    let mut rng = StdRng::seed_from_u64(seed);
    for cycle in 0..cycles {
        let ops = random_mutation(&mut g, &info, &mut rng);
        let t = g.tracee();
        restore(t, &snap, &mut tracker, &opts).unwrap();
        let got = capture(t);
        if let Some(d) = difference(&want, &got) {
            panic!("cycle {cycle} after {ops:?}: {d}");
        }
        t.resume().unwrap();
    }
    let after = GuestInfo::of(&mut g);
    assert_eq!(after.arena, info.arena);
}

#[test]
fn random_cycles_restore_exactly() {
    fidelity_cycles(RestoreOrder::RegistersFirst, false, 40, 7);
}

#[test]
fn madvise_first_order_is_equivalent() {
    fidelity_cycles(RestoreOrder::MadviseFirst, false, 25, 11);
}

#[test]
fn full_stack_zeroing_is_equivalent() {
    fidelity_cycles(RestoreOrder::RegistersFirst, true, 15, 13);
}

#[test]
fn second_restore_does_nothing() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut g = Guest::start(&["--arena-pages", "128"]);
    let info = GuestInfo::of(&mut g);
    let mut tracker = DirtyTracker::new().unwrap();
    let t = g.tracee();
    t.quiesce().unwrap();
    let snap = take_snapshot(t, &mut tracker, &SnapshotPolicy::default()).unwrap();
    t.resume().unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..10 {
        random_mutation(&mut g, &info, &mut rng);
        let t = g.tracee();
        let opts = RestoreOptions::default();
        let first = restore(t, &snap, &mut tracker, &opts).unwrap();
        assert!(first.pages_restored > 0 || first.layout_changes > 0 || first.pages_advised > 0);
        let delta = pending_delta(t, &snap, &tracker).unwrap();
        assert!(delta.is_empty(), "{delta:?}");
        let second = restore(t, &snap, &mut tracker, &opts).unwrap();
        assert_eq!(second.pages_restored, 0);
        assert_eq!(second.layout_changes, 0);
        assert_eq!(second.syscalls_injected, 0);
        t.resume().unwrap();
    }
}

#[test]
fn restore_counts_written_pages() {
    let mut g = Guest::start(&["--arena-pages", "512"]);
    let info = GuestInfo::of(&mut g);
    let mut tracker = DirtyTracker::new().unwrap();
    let t = g.tracee();
    t.quiesce().unwrap();
    let snap = take_snapshot(t, &mut tracker, &SnapshotPolicy::default()).unwrap();
    t.resume().unwrap();
    let pages: Vec<u64> = (0..100).map(|i| i * 5).collect();
    g.call(json!({"op": "write_pages", "pages": pages}));
    let t = g.tracee();
    let r = restore(t, &snap, &mut tracker, &RestoreOptions::default()).unwrap();
    // The guest's own request handling touches a few pages of stack and data.
    assert!(r.pages_restored >= 100 && r.pages_restored < 130, "{r:?}");
    assert!(r.pages_scanned >= info.arena_pages);
    assert_eq!(r.steps_sum_us(), r.total_us);
    t.resume().unwrap();
}
