//! Microbenchmark methodology: sweeps over dirty fraction and arena size,
//! low and high load, scaling over concurrent pairs, and result files.

pub mod isolation;
pub mod record;
pub mod scaling;
pub mod stats;
pub mod workload;

pub use record::{read_csv, write_csv, Load, RestoreTiming, RunResult, Sample, CSV_HEADER};
pub use stats::{spearman, LinearFit, Summary};
pub use workload::{run_sweep, run_workload, BenchEnv, Dirty, WorkloadSpec};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::restore::Step;

/// Per-cell latency summary plus the mean restore decomposition.
pub fn summarize(results: &[RunResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10}",
        "run", "n", "median_us", "p90_us", "mean_us", "cov", "restore_us"
    );
    for r in results {
        let sum = r.summary();
        let restores: Vec<f64> = r.restores().map(|t| t.total_us as f64).collect();
        let restore = if restores.is_empty() { "-".to_string() } else { format!("{:.0}", stats::mean(&restores)) };
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>10.0} {:>10.0} {:>10.0} {:>8.3} {:>10}",
            r.run_id, sum.n, sum.median, sum.p90, sum.mean, sum.cov, restore
        );
    }
    let with_restore: Vec<&RunResult> = results.iter().filter(|r| r.restores().next().is_some()).collect();
    if !with_restore.is_empty() {
        let _ = writeln!(s, "\nmean restore decomposition (us):");
        let _ = write!(s, "{:<28}", "run");
        for step in Step::ALL {
            let _ = write!(s, " {:>8}", abbreviate(step));
        }
        let _ = writeln!(s);
        for r in with_restore {
            let n = r.restores().count() as f64;
            let _ = write!(s, "{:<28}", r.run_id);
            for step in Step::ALL {
                let m = r.restores().map(|t| t.step(step) as f64).sum::<f64>() / n;
                let _ = write!(s, " {:>8.0}", m);
            }
            let _ = writeln!(s);
        }
    }
    let mut knees = String::new();
    knee_lines(results, &mut knees);
    if !knees.is_empty() {
        let _ = write!(s, "\nlatency knee over dirty pages:\n{knees}");
    }
    s
}

/// Change of slope in latency against dirty pages, for one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Knee {
    pub dirty_pages: u64,
    pub slope_below: f64,
    pub slope_above: f64,
}

/// Best two-segment fit of cell medians sharing one breakpoint. Reported
/// only when it explains at least half of the single-line residual and the
/// slopes differ by more than 25%.
pub fn find_knee(cells: &[(u64, f64)]) -> Option<Knee> {
    if cells.len() < 5 {
        return None;
    }
    let xs: Vec<f64> = cells.iter().map(|c| c.0 as f64).collect();
    let ys: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let sse = |xs: &[f64], ys: &[f64], f: &LinearFit| -> f64 {
        xs.iter().zip(ys).map(|(x, y)| (y - f.intercept - f.slope * x).powi(2)).sum()
    };
    let whole = LinearFit::of(&xs, &ys)?;
    let base = sse(&xs, &ys, &whole);
    let mut best: Option<(f64, Knee)> = None;
    for k in 2..cells.len() - 2 {
        let (Some(lo), Some(hi)) = (LinearFit::of(&xs[..=k], &ys[..=k]), LinearFit::of(&xs[k..], &ys[k..])) else {
            continue;
        };
        let e = sse(&xs[..=k], &ys[..=k], &lo) + sse(&xs[k..], &ys[k..], &hi);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, Knee { dirty_pages: cells[k].0, slope_below: lo.slope, slope_above: hi.slope }));
        }
    }
    let (e, knee) = best?;
    let ratio = knee.slope_above / knee.slope_below;
    (e <= 0.5 * base && !(0.8..=1.25).contains(&ratio)).then_some(knee)
}

fn knee_lines(results: &[RunResult], s: &mut String) {
    // (mode, load, arena) -> (dirty pages, median latency)
    type Key = (String, &'static str, u64);
    let mut groups: BTreeMap<Key, Vec<(u64, f64)>> = BTreeMap::new();
    for r in results {
        groups.entry((r.mode.clone(), r.load.name(), r.arena_pages)).or_default().push((r.dirty_pages, r.summary().median));
    }
    for ((mode, load, arena), mut cells) in groups {
        cells.sort_by_key(|c| c.0);
        cells.dedup_by_key(|c| c.0);
        if cells.len() < 5 {
            continue;
        }
        let _ = match find_knee(&cells) {
            Some(k) => writeln!(
                s,
                "{mode}-{load}-a{arena}: slope {:.3} us/page below {} dirty pages, {:.3} above",
                k.slope_below, k.dirty_pages, k.slope_above
            ),
            None => writeln!(s, "{mode}-{load}-a{arena}: no knee"),
        };
    }
}

fn abbreviate(step: Step) -> &'static str {
    match step {
        Step::Interrupting => "intr",
        Step::ReadingMaps => "maps",
        Step::ScanningPages => "scan",
        Step::DiffingLayout => "diff",
        Step::SyscallBrk => "brk",
        Step::SyscallMmap => "mmap",
        Step::SyscallMunmap => "munmap",
        Step::SyscallMadvise => "madvise",
        Step::SyscallMprotect => "mprot",
        Step::RestoringPageContents => "pages",
        Step::RestoringRegisters => "regs",
        Step::ClearingSoftDirty => "sdclear",
        Step::Detaching => "detach",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knee_is_found_where_the_slope_changes() {
        let cells: Vec<(u64, f64)> =
            (0..=10).map(|i| (i * 100, if i <= 6 { i as f64 * 10.0 } else { 60.0 + (i - 6) as f64 * 40.0 })).collect();
        let k = find_knee(&cells).unwrap();
        assert_eq!(k.dirty_pages, 600);
        assert!((k.slope_below - 0.1).abs() < 1e-9 && (k.slope_above - 0.4).abs() < 1e-9);
    }

    #[test]
    fn straight_lines_have_no_knee() {
        let cells: Vec<(u64, f64)> = (0..=10).map(|i| (i * 100, 5.0 + i as f64 * 3.0 + (i % 2) as f64 * 0.1)).collect();
        assert_eq!(find_knee(&cells), None);
        assert_eq!(find_knee(&cells[..4]), None);
    }
}
