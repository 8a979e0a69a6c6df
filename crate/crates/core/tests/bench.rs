mod common;

use std::process::Command;
use std::time::Duration;

use common::REFGUEST;
use rewind::bench::scaling::{run_scaling, ScalingSpec};
use rewind::bench::workload::arena_sweep;
use rewind::bench::{read_csv, run_sweep, run_workload, write_csv, BenchEnv, Dirty, Load, WorkloadSpec};
use rewind::manager::Mode;

fn spec(mode: Mode, load: Load, arena: u64, dirty: u64) -> WorkloadSpec {
    WorkloadSpec { request_count: 12, ..WorkloadSpec::new(mode, load, arena, Dirty::Count(dirty)) }
}

#[test]
fn low_load_is_never_slower_than_high_load() {
    let env = BenchEnv::new(REFGUEST);
    for dirty in [0, 1_000, 4_000] {
        let low = run_workload(&env, &spec(Mode::Gh, Load::Low, 4_000, dirty)).unwrap();
        let high = run_workload(&env, &spec(Mode::Gh, Load::High, 4_000, dirty)).unwrap();
        let (l, h) = (low.summary().median, high.summary().median);
        assert!(l <= h, "dirty {dirty}: low {l}us > high {h}us");
    }
}

#[test]
fn restored_page_counts_repeat() {
    let env = BenchEnv::new(REFGUEST);
    let s = WorkloadSpec { repetitions: 2, ..spec(Mode::Gh, Load::High, 2_000, 500) };
    let r = run_workload(&env, &s).unwrap();
    assert_eq!(r.samples.len(), 24);
    let counts: Vec<u64> = r.restores().map(|t| t.pages_restored).collect();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 2, "{counts:?}");
    assert!(*lo >= 500);
    assert!(r.throughput() > 0.0);
}

#[test]
fn sweep_results_survive_csv() {
    let env = BenchEnv::new(REFGUEST);
    let template = WorkloadSpec { request_count: 3, discard: 1, ..spec(Mode::Gh, Load::Low, 1, 0) };
    let (results, failures) =
        run_sweep(&env, &[Mode::Gh, Mode::Base], &[Load::Low], &arena_sweep(10, &[100, 300]), &template);
    assert!(failures.is_empty());
    assert_eq!(results.len(), 4);
    let mut buf = Vec::new();
    write_csv(&results, &mut buf).unwrap();
    assert_eq!(read_csv(buf.as_slice()).unwrap(), results);
}

#[test]
fn bench_cli_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["sweep", "--mode", "gh,gh-nop", "--out"])
        .arg(dir.path())
        .args(["--sweep", "arena", "--arena-list", "200,400", "--dirty-count", "20", "--requests", "2"])
        .args(["--guest", REFGUEST])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gh-nop-high-a400-d20"), "{stdout}");
    let csv = std::fs::read(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(read_csv(csv.as_slice()).unwrap().len(), 8);

    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["isolation", "--mode", "gh,base", "--trials", "3", "--out"])
        .arg(dir.path())
        .args(["--guest", REFGUEST])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("isolation.csv")).unwrap();
    assert_eq!(text, "mode,trials,found\ngh,3,0\nbase,3,3\n");
}

#[test]
fn scaling_measures_closed_loop_throughput() {
    let spec = ScalingSpec {
        mode: Mode::Gh,
        work_ms: 20,
        duration: Duration::from_secs(1),
        repetitions: 1,
        supervisor: common::SUPERVISOR.into(),
        guest: REFGUEST.into(),
    };
    assert!(run_scaling(0, &spec).unwrap().is_empty());
    let points = run_scaling(1, &spec).unwrap();
    assert_eq!(points.len(), 1);
    let rps = points[0].mean_rps;
    assert!(rps > 10.0 && rps <= 52.0, "{rps}");
}
