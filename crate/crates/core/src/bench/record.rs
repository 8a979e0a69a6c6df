//! Per-request result rows and their CSV form.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::stats::Summary;
use crate::restore::{RestoreReport, Step};

pub const CSV_HEADER: &str = "run_id,mode,load,arena_pages,dirty_pages,request_idx,latency_us,restore_total_us,restore_interrupt_us,restore_read_maps_us,restore_scan_us,restore_diff_us,restore_brk_us,restore_mmap_us,restore_munmap_us,restore_madvise_us,restore_mprotect_us,restore_pages_us,restore_regs_us,restore_sd_clear_us,restore_detach_us,pages_scanned,pages_restored,syscalls_injected";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Load {
    /// One request at a time, with a gap long enough for the rollback.
    Low,
    /// Back to back.
    High,
}

impl Load {
    pub fn name(self) -> &'static str {
        match self {
            Load::Low => "low",
            Load::High => "high",
        }
    }
}

impl std::str::FromStr for Load {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "low" => Ok(Load::Low),
            "high" => Ok(Load::High),
            _ => Err(format!("unknown load {s:?}")),
        }
    }
}

/// The restore fields of one CSV row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreTiming {
    pub total_us: u64,
    /// Indexed like [`Step::ALL`].
    pub steps_us: [u64; 13],
    pub pages_scanned: u64,
    pub pages_restored: u64,
    pub syscalls_injected: u64,
}

impl RestoreTiming {
    pub fn step(&self, s: Step) -> u64 {
        self.steps_us[s as usize]
    }

    pub fn steps_sum(&self) -> u64 {
        self.steps_us.iter().sum()
    }
}

impl From<&RestoreReport> for RestoreTiming {
    fn from(r: &RestoreReport) -> Self {
        RestoreTiming {
            total_us: r.total_us,
            steps_us: Step::ALL.map(|s| r.step_us(s)),
            pages_scanned: r.pages_scanned,
            pages_restored: r.pages_restored,
            syscalls_injected: r.syscalls_injected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub request_idx: u64,
    pub latency_us: u64,
    pub restore: Option<RestoreTiming>,
}

/// Samples of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub mode: String,
    pub load: Load,
    pub arena_pages: u64,
    pub dirty_pages: u64,
    pub samples: Vec<Sample>,
}

impl RunResult {
    pub fn latencies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.latency_us as f64).collect()
    }

    pub fn summary(&self) -> Summary {
        Summary::of(&self.latencies())
    }

    pub fn restores(&self) -> impl Iterator<Item = &RestoreTiming> {
        self.samples.iter().filter_map(|s| s.restore.as_ref())
    }

    /// Requests per second if requests had been issued back to back with
    /// these latencies.
    pub fn throughput(&self) -> f64 {
        let total: u64 = self.samples.iter().map(|s| s.latency_us).sum();
        if total == 0 {
            return 0.0;
        }
        self.samples.len() as f64 * 1e6 / total as f64
    }
}

/// The flat CSV row. Restore columns are empty when the request had none.
#[derive(Debug, Serialize, Deserialize)]
struct Row {
    run_id: String,
    mode: String,
    load: Load,
    arena_pages: u64,
    dirty_pages: u64,
    request_idx: u64,
    latency_us: u64,
    restore_total_us: Option<u64>,
    restore_interrupt_us: Option<u64>,
    restore_read_maps_us: Option<u64>,
    restore_scan_us: Option<u64>,
    restore_diff_us: Option<u64>,
    restore_brk_us: Option<u64>,
    restore_mmap_us: Option<u64>,
    restore_munmap_us: Option<u64>,
    restore_madvise_us: Option<u64>,
    restore_mprotect_us: Option<u64>,
    restore_pages_us: Option<u64>,
    restore_regs_us: Option<u64>,
    restore_sd_clear_us: Option<u64>,
    restore_detach_us: Option<u64>,
    pages_scanned: Option<u64>,
    pages_restored: Option<u64>,
    syscalls_injected: Option<u64>,
}

impl Row {
    fn new(r: &RunResult, s: &Sample) -> Row {
        let t = s.restore;
        let step = |st: Step| t.map(|t| t.step(st));
        Row {
            run_id: r.run_id.clone(),
            mode: r.mode.clone(),
            load: r.load,
            arena_pages: r.arena_pages,
            dirty_pages: r.dirty_pages,
            request_idx: s.request_idx,
            latency_us: s.latency_us,
            restore_total_us: t.map(|t| t.total_us),
            restore_interrupt_us: step(Step::Interrupting),
            restore_read_maps_us: step(Step::ReadingMaps),
            restore_scan_us: step(Step::ScanningPages),
            restore_diff_us: step(Step::DiffingLayout),
            restore_brk_us: step(Step::SyscallBrk),
            restore_mmap_us: step(Step::SyscallMmap),
            restore_munmap_us: step(Step::SyscallMunmap),
            restore_madvise_us: step(Step::SyscallMadvise),
            restore_mprotect_us: step(Step::SyscallMprotect),
            restore_pages_us: step(Step::RestoringPageContents),
            restore_regs_us: step(Step::RestoringRegisters),
            restore_sd_clear_us: step(Step::ClearingSoftDirty),
            restore_detach_us: step(Step::Detaching),
            pages_scanned: t.map(|t| t.pages_scanned),
            pages_restored: t.map(|t| t.pages_restored),
            syscalls_injected: t.map(|t| t.syscalls_injected),
        }
    }

    fn timing(&self) -> Result<Option<RestoreTiming>, String> {
        let Some(total_us) = self.restore_total_us else { return Ok(None) };
        let steps = [
            self.restore_interrupt_us,
            self.restore_read_maps_us,
            self.restore_scan_us,
            self.restore_diff_us,
            self.restore_brk_us,
            self.restore_mmap_us,
            self.restore_munmap_us,
            self.restore_madvise_us,
            self.restore_mprotect_us,
            self.restore_pages_us,
            self.restore_regs_us,
            self.restore_sd_clear_us,
            self.restore_detach_us,
        ];
        let missing = || format!("run {} request {}: incomplete restore columns", self.run_id, self.request_idx);
        let mut steps_us = [0u64; 13];
        for (out, v) in steps_us.iter_mut().zip(steps) {
            *out = v.ok_or_else(missing)?;
        }
        Ok(Some(RestoreTiming {
            total_us,
            steps_us,
            pages_scanned: self.pages_scanned.ok_or_else(missing)?,
            pages_restored: self.pages_restored.ok_or_else(missing)?,
            syscalls_injected: self.syscalls_injected.ok_or_else(missing)?,
        }))
    }
}

pub fn write_csv(results: &[RunResult], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if results.iter().all(|r| r.samples.is_empty()) {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in results {
        for s in &r.samples {
            w.serialize(Row::new(r, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses rows back into runs, in order of first appearance.
pub fn read_csv(input: impl Read) -> Result<Vec<RunResult>, String> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(|e| e.to_string())?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut runs: BTreeMap<String, RunResult> = BTreeMap::new();
    for row in rd.deserialize::<Row>() {
        let row = row.map_err(|e| e.to_string())?;
        let sample = Sample { request_idx: row.request_idx, latency_us: row.latency_us, restore: row.timing()? };
        let run = runs.entry(row.run_id.clone()).or_insert_with(|| {
            order.push(row.run_id.clone());
            RunResult {
                run_id: row.run_id.clone(),
                mode: row.mode.clone(),
                load: row.load,
                arena_pages: row.arena_pages,
                dirty_pages: row.dirty_pages,
                samples: Vec::new(),
            }
        });
        if (run.mode.as_str(), run.load, run.arena_pages, run.dirty_pages)
            != (row.mode.as_str(), row.load, row.arena_pages, row.dirty_pages)
        {
            return Err(format!("run {} changes its cell parameters", row.run_id));
        }
        run.samples.push(sample);
    }
    Ok(order.into_iter().map(|id| runs.remove(&id).expect("recorded")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_matches_rows() {
        let r = RunResult {
            run_id: "x".into(),
            mode: "gh".into(),
            load: Load::Low,
            arena_pages: 1,
            dirty_pages: 0,
            samples: vec![Sample { request_idx: 0, latency_us: 5, restore: None }],
        };
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "x,gh,low,1,0,0,5,,,,,,,,,,,,,,,,,");
    }

    #[test]
    fn empty_results_still_have_a_header() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER);
        assert_eq!(read_csv(CSV_HEADER.as_bytes()).unwrap(), Vec::new());
    }

    #[test]
    fn report_steps_land_in_their_columns() {
        let rep = RestoreReport { syscall_munmap_us: 7, restoring_page_contents_us: 11, total_us: 18, ..Default::default() };
        let t = RestoreTiming::from(&rep);
        assert_eq!(t.step(Step::SyscallMunmap), 7);
        assert_eq!(t.step(Step::RestoringPageContents), 11);
        assert_eq!(t.steps_sum(), t.total_us);
    }

    fn timing() -> impl Strategy<Value = Option<RestoreTiming>> {
        proptest::option::of(
            (any::<[u32; 13]>(), any::<u32>(), any::<u32>(), any::<u16>()).prop_map(|(steps, scanned, restored, sys)| {
                let steps_us = steps.map(u64::from);
                RestoreTiming {
                    total_us: steps_us.iter().sum(),
                    steps_us,
                    pages_scanned: scanned.into(),
                    pages_restored: restored.into(),
                    syscalls_injected: sys.into(),
                }
            }),
        )
    }

    fn run() -> impl Strategy<Value = RunResult> {
        (
            "[a-z0-9,\" -]{1,12}",
            prop_oneof![Just("gh"), Just("gh-nop"), Just("base"), Just("fork")],
            prop_oneof![Just(Load::Low), Just(Load::High)],
            any::<u32>(),
            any::<u32>(),
            proptest::collection::vec((any::<u32>(), timing()), 1..8),
        )
            .prop_map(|(id, mode, load, arena, dirty, samples)| RunResult {
                run_id: id,
                mode: mode.into(),
                load,
                arena_pages: arena.into(),
                dirty_pages: dirty.into(),
                samples: samples
                    .into_iter()
                    .enumerate()
                    .map(|(i, (lat, restore))| Sample { request_idx: i as u64, latency_us: lat.into(), restore })
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn csv_round_trips(runs in proptest::collection::vec(run(), 0..5)) {
            // run ids identify runs, so make them distinct
            let runs: Vec<RunResult> = runs
                .into_iter()
                .enumerate()
                .map(|(i, mut r)| { r.run_id = format!("{i}:{}", r.run_id); r })
                .collect();
            let mut buf = Vec::new();
            write_csv(&runs, &mut buf).unwrap();
            prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), runs);
        }
    }
}
