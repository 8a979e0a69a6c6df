//! Per-step timing of one restore.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    Interrupting,
    ReadingMaps,
    ScanningPages,
    DiffingLayout,
    SyscallBrk,
    SyscallMmap,
    SyscallMunmap,
    SyscallMadvise,
    SyscallMprotect,
    RestoringPageContents,
    RestoringRegisters,
    ClearingSoftDirty,
    Detaching,
}

impl Step {
    pub const ALL: [Step; 13] = [
        Step::Interrupting,
        Step::ReadingMaps,
        Step::ScanningPages,
        Step::DiffingLayout,
        Step::SyscallBrk,
        Step::SyscallMmap,
        Step::SyscallMunmap,
        Step::SyscallMadvise,
        Step::SyscallMprotect,
        Step::RestoringPageContents,
        Step::RestoringRegisters,
        Step::ClearingSoftDirty,
        Step::Detaching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Interrupting => "interrupting",
            Step::ReadingMaps => "reading_maps",
            Step::ScanningPages => "scanning_pages",
            Step::DiffingLayout => "diffing_layout",
            Step::SyscallBrk => "syscall_brk",
            Step::SyscallMmap => "syscall_mmap",
            Step::SyscallMunmap => "syscall_munmap",
            Step::SyscallMadvise => "syscall_madvise",
            Step::SyscallMprotect => "syscall_mprotect",
            Step::RestoringPageContents => "restoring_page_contents",
            Step::RestoringRegisters => "restoring_registers",
            Step::ClearingSoftDirty => "clearing_soft_dirty",
            Step::Detaching => "detaching",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub interrupting_us: u64,
    pub reading_maps_us: u64,
    pub scanning_pages_us: u64,
    pub diffing_layout_us: u64,
    pub syscall_brk_us: u64,
    pub syscall_mmap_us: u64,
    pub syscall_munmap_us: u64,
    pub syscall_madvise_us: u64,
    pub syscall_mprotect_us: u64,
    pub restoring_page_contents_us: u64,
    pub restoring_registers_us: u64,
    pub clearing_soft_dirty_us: u64,
    pub detaching_us: u64,
    pub total_us: u64,
    pub pages_scanned: u64,
    pub pages_restored: u64,
    pub syscalls_injected: u64,
    pub layout_changes: u64,
    /// Pages written since the last reset, as reported by the tracker.
    pub dirty_pages: u64,
    pub pages_zeroed: u64,
    pub pages_advised: u64,
}

impl RestoreReport {
    pub fn step_us(&self, step: Step) -> u64 {
        match step {
            Step::Interrupting => self.interrupting_us,
            Step::ReadingMaps => self.reading_maps_us,
            Step::ScanningPages => self.scanning_pages_us,
            Step::DiffingLayout => self.diffing_layout_us,
            Step::SyscallBrk => self.syscall_brk_us,
            Step::SyscallMmap => self.syscall_mmap_us,
            Step::SyscallMunmap => self.syscall_munmap_us,
            Step::SyscallMadvise => self.syscall_madvise_us,
            Step::SyscallMprotect => self.syscall_mprotect_us,
            Step::RestoringPageContents => self.restoring_page_contents_us,
            Step::RestoringRegisters => self.restoring_registers_us,
            Step::ClearingSoftDirty => self.clearing_soft_dirty_us,
            Step::Detaching => self.detaching_us,
        }
    }

    fn step_mut(&mut self, step: Step) -> &mut u64 {
        match step {
            Step::Interrupting => &mut self.interrupting_us,
            Step::ReadingMaps => &mut self.reading_maps_us,
            Step::ScanningPages => &mut self.scanning_pages_us,
            Step::DiffingLayout => &mut self.diffing_layout_us,
            Step::SyscallBrk => &mut self.syscall_brk_us,
            Step::SyscallMmap => &mut self.syscall_mmap_us,
            Step::SyscallMunmap => &mut self.syscall_munmap_us,
            Step::SyscallMadvise => &mut self.syscall_madvise_us,
            Step::SyscallMprotect => &mut self.syscall_mprotect_us,
            Step::RestoringPageContents => &mut self.restoring_page_contents_us,
            Step::RestoringRegisters => &mut self.restoring_registers_us,
            Step::ClearingSoftDirty => &mut self.clearing_soft_dirty_us,
            Step::Detaching => &mut self.detaching_us,
        }
    }

    pub fn steps_sum_us(&self) -> u64 {
        Step::ALL.iter().map(|&s| self.step_us(s)).sum()
    }

    pub fn total(&self) -> Duration {
        Duration::from_micros(self.total_us)
    }
}

/// Attributes wall-clock time to steps. Every instant between the timer's
/// start and the last lap belongs to exactly one step.
#[derive(Debug)]
pub struct StepTimer {
    last: Instant,
    spent: [Duration; 13],
}

impl StepTimer {
    pub fn start() -> Self {
        Self::start_at(Instant::now())
    }

    pub fn start_at(at: Instant) -> Self {
        StepTimer { last: at, spent: [Duration::ZERO; 13] }
    }

    /// Charges the time since the previous lap to `step`.
    pub fn lap(&mut self, step: Step) {
        let now = Instant::now();
        self.spent[step as usize] += now - self.last;
        self.last = now;
    }

    pub fn spent(&self, step: Step) -> Duration {
        self.spent[step as usize]
    }

    /// Writes the durations into `report`. Rounding is done on the running
    /// sum so the steps add up to the total exactly.
    pub fn finish(&self, report: &mut RestoreReport) {
        let mut cumulative = Duration::ZERO;
        let mut prev_us = 0u64;
        for step in Step::ALL {
            cumulative += self.spent[step as usize];
            let us = round_us(cumulative);
            *report.step_mut(step) = us - prev_us;
            prev_us = us;
        }
        report.total_us = prev_us;
    }
}

fn round_us(d: Duration) -> u64 {
    ((d.as_nanos() + 500) / 1000) as u64
}
