//! Driving one guest with the page-dirtying microbenchmark.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::debug;
use serde_json::json;

use super::record::{Load, RestoreTiming, RunResult, Sample};
use crate::error::{Error, Result};
use crate::manager::{GuestHandle, ManagerConfig, Mode, RequestEnvelope, SpawnConfig};

pub const DEFAULT_REQUESTS: usize = 150;
pub const WARMUP_DISCARD: usize = 5;
const GAP_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dirty {
    Count(u64),
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub load: Load,
    /// Measured requests per repetition, after the discarded warm-up ones.
    pub request_count: usize,
    pub arena_pages: u64,
    pub dirty: Dirty,
    pub mode: Mode,
    pub repetitions: usize,
    pub discard: usize,
    /// Low load waits this multiple of the recent worst restore between requests.
    pub gap_factor: f64,
}

impl WorkloadSpec {
    pub fn new(mode: Mode, load: Load, arena_pages: u64, dirty: Dirty) -> Self {
        WorkloadSpec {
            load,
            request_count: DEFAULT_REQUESTS,
            arena_pages,
            dirty,
            mode,
            repetitions: 1,
            discard: WARMUP_DISCARD,
            gap_factor: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.request_count == 0 || self.repetitions == 0 {
            return Err(Error::Config("request count and repetitions must be at least 1".into()));
        }
        if let Dirty::Fraction(f) = self.dirty {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("dirty fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dirty_pages(&self) -> u64 {
        match self.dirty {
            Dirty::Count(n) => n.min(self.arena_pages),
            Dirty::Fraction(f) => (f * self.arena_pages as f64).round() as u64,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-a{}-d{}", self.mode, self.load.name(), self.arena_pages, self.dirty_pages())
    }
}

/// Where the guest comes from.
#[derive(Clone, Debug)]
pub struct BenchEnv {
    pub guest: PathBuf,
    pub guest_args: Vec<String>,
    pub restore: crate::restore::RestoreOptions,
}

impl BenchEnv {
    pub fn new(guest: impl Into<PathBuf>) -> Self {
        BenchEnv { guest: guest.into(), guest_args: Vec::new(), restore: Default::default() }
    }

    /// Spawns a warmed-up reference guest with an arena of `arena_pages`.
    pub fn start(&self, mode: Mode, arena_pages: u64) -> Result<GuestHandle> {
        let mut args = vec!["--arena-pages".to_string(), arena_pages.to_string()];
        args.extend(self.guest_args.iter().cloned());
        let mut cfg = ManagerConfig::new(mode, SpawnConfig::new(&self.guest, args));
        cfg.forward_stderr = false;
        cfg.restore = self.restore.clone();
        let dummy = RequestEnvelope::new("warmup".into(), json!({"op": "bench", "dirty": 0}), None, Instant::now());
        GuestHandle::start(cfg, &dummy)
    }
}

/// Latencies at the supervisor boundary. Low load measures forwarding to
/// response; high load measures from the previous response to this one,
/// which is when a back-to-back client's next request arrives.
pub fn run_workload(env: &BenchEnv, spec: &WorkloadSpec) -> Result<RunResult> {
    spec.validate()?;
    let dirty = spec.dirty_pages();
    let mut samples = Vec::with_capacity(spec.request_count * spec.repetitions);
    for rep in 0..spec.repetitions {
        let mut guest = env.start(spec.mode, spec.arena_pages)?;
        let mut recent: VecDeque<u64> = VecDeque::with_capacity(GAP_WINDOW);
        let mut prev_response: Option<Instant> = None;
        for i in 0..spec.discard + spec.request_count {
            if spec.load == Load::Low {
                if let (Some(prev), Some(&worst)) = (prev_response, recent.iter().max()) {
                    let gap = Duration::from_secs_f64(worst as f64 * spec.gap_factor / 1e6);
                    let wake = prev + gap;
                    let now = Instant::now();
                    if wake > now {
                        std::thread::sleep(wake - now);
                    }
                }
            }
            let req = RequestEnvelope::new(
                format!("{rep}-{i}"),
                json!({"op": "bench", "dirty": dirty}),
                None,
                Instant::now(),
            );
            let ex = guest.handle_request(&req, |_| {})?;
            if ex.timed_out {
                return Err(Error::Timeout(format!("bench request {i} of {}", spec.run_id())));
            }
            if let Some(e) = ex.result.as_ref().and_then(|r| r.get("error")) {
                return Err(Error::GuestError(format!("bench request failed: {e}")));
            }
            let restore = ex.restore.as_ref().map(RestoreTiming::from);
            if let Some(r) = &restore {
                if recent.len() == GAP_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(r.total_us);
            }
            let latency = match (spec.load, prev_response) {
                (Load::High, Some(prev)) => ex.responded_at - prev,
                _ => ex.latency(),
            };
            prev_response = Some(ex.responded_at);
            if i >= spec.discard {
                samples.push(Sample {
                    request_idx: (rep * spec.request_count + i - spec.discard) as u64,
                    latency_us: latency.as_micros() as u64,
                    restore,
                });
            }
        }
        guest.shutdown()?;
    }
    debug!("{}: {} samples", spec.run_id(), samples.len());
    Ok(RunResult {
        run_id: spec.run_id(),
        mode: spec.mode.to_string(),
        load: spec.load,
        arena_pages: spec.arena_pages,
        dirty_pages: dirty,
        samples,
    })
}

/// Arena fixed, dirty fraction 0..=100% in steps of 10.
pub fn dirty_sweep(arena_pages: u64) -> Vec<(u64, Dirty)> {
    (0..=10).map(|i| (arena_pages, Dirty::Fraction(i as f64 / 10.0))).collect()
}

/// Dirty count fixed, growing arena.
pub fn arena_sweep(dirty: u64, arenas: &[u64]) -> Vec<(u64, Dirty)> {
    arenas.iter().map(|&a| (a, Dirty::Count(dirty))).collect()
}

pub const DEFAULT_ARENAS: [u64; 5] = [1_000, 5_000, 10_000, 50_000, 100_000];

/// Runs every (mode, load, cell) combination. Failed cells are reported
/// and skipped.
pub fn run_sweep(
    env: &BenchEnv,
    modes: &[Mode],
    loads: &[Load],
    cells: &[(u64, Dirty)],
    template: &WorkloadSpec,
) -> (Vec<RunResult>, Vec<(String, Error)>) {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &mode in modes {
        for &load in loads {
            for &(arena_pages, dirty) in cells {
                let spec = WorkloadSpec { mode, load, arena_pages, dirty, ..template.clone() };
                match run_workload(env, &spec) {
                    Ok(r) => results.push(r),
                    Err(e) => {
                        log::warn!("{}: {e}", spec.run_id());
                        failures.push((spec.run_id(), e));
                    }
                }
            }
        }
    }
    (results, failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirty_counts() {
        let s = WorkloadSpec::new(Mode::Gh, Load::Low, 25_000, Dirty::Fraction(0.3));
        assert_eq!(s.dirty_pages(), 7_500);
        let s = WorkloadSpec { dirty: Dirty::Count(2_000), arena_pages: 1_000, ..s };
        assert_eq!(s.dirty_pages(), 1_000);
        assert_eq!(s.run_id(), "gh-low-a1000-d1000");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = WorkloadSpec::new(Mode::Gh, Load::Low, 10, Dirty::Fraction(1.5));
        assert!(s.validate().is_err());
        let s = WorkloadSpec { request_count: 0, dirty: Dirty::Count(1), ..s };
        assert!(s.validate().is_err());
    }

    #[test]
    fn sweeps_have_the_expected_cells() {
        let a = dirty_sweep(100_000);
        assert_eq!(a.len(), 11);
        assert_eq!(a[10].1, Dirty::Fraction(1.0));
        let b = arena_sweep(1_000, &DEFAULT_ARENAS);
        assert_eq!(b.iter().map(|c| c.0).collect::<Vec<_>>(), DEFAULT_ARENAS);
    }
}
