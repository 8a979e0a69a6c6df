//! Throughput of several independent supervisor+guest pairs.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use super::stats::{mean, std_dev};
use super::workload::WARMUP_DISCARD;
use crate::error::{Error, Result};
use crate::manager::Mode;

#[derive(Clone, Debug)]
pub struct ScalingSpec {
    pub mode: Mode,
    /// CPU time each request burns in the guest.
    pub work_ms: u64,
    pub duration: Duration,
    pub repetitions: usize,
    pub supervisor: PathBuf,
    pub guest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub pairs: usize,
    pub mean_rps: f64,
    pub std_rps: f64,
    pub runs: Vec<f64>,
    pub pinned: bool,
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn pin_to(cpu: usize) -> std::io::Result<()> {
    // SAFETY: cpu_set_t is plain data; the call affects only this process.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}

/// Throughput for 1..=`max_pairs` concurrent pairs. With fewer cores than
/// pairs the pairs run unpinned and an InsufficientCores warning is logged.
pub fn run_scaling(max_pairs: usize, spec: &ScalingSpec) -> Result<Vec<ScalingPoint>> {
    let dummy = std::env::temp_dir().join(format!("scaling-dummy-{}.json", std::process::id()));
    std::fs::write(&dummy, r#"{"op":"work","ms":1}"#)?;
    let mut points = Vec::new();
    for pairs in 1..=max_pairs {
        let pinned = pairs <= available_cores();
        if !pinned {
            warn!("InsufficientCores: {pairs} pairs on {} cores, running unpinned", available_cores());
        }
        let mut runs = Vec::new();
        for _ in 0..spec.repetitions {
            runs.push(run_pairs(pairs, pinned, spec, &dummy)?);
        }
        points.push(ScalingPoint { pairs, mean_rps: mean(&runs), std_rps: std_dev(&runs), runs, pinned });
    }
    let _ = std::fs::remove_file(&dummy);
    Ok(points)
}

fn run_pairs(pairs: usize, pinned: bool, spec: &ScalingSpec, dummy: &std::path::Path) -> Result<f64> {
    let barrier = Arc::new(Barrier::new(pairs));
    let mut workers = Vec::new();
    for i in 0..pairs {
        let mut cmd = Command::new(&spec.supervisor);
        cmd.args(["--mode", spec.mode.name(), "--dummy-input"])
            .arg(dummy)
            .arg("--")
            .arg(&spec.guest)
            .args(["--arena-pages", "16"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        if pinned {
            // SAFETY: only an async-signal-safe syscall runs between fork and exec.
            unsafe { cmd.pre_exec(move || pin_to(i)) };
        }
        let mut child = cmd.spawn()?;
        let barrier = Arc::clone(&barrier);
        let work_ms = spec.work_ms;
        let duration = spec.duration;
        workers.push(std::thread::spawn(move || -> Result<u64> {
            let mut stdin = child.stdin.take().expect("piped");
            let mut stdout = BufReader::new(child.stdout.take().expect("piped"));
            let mut line = String::new();
            let mut ask = |n: u64| -> Result<()> {
                writeln!(stdin, r#"{{"id":"{n}","value":{{"op":"work","ms":{work_ms}}}}}"#)?;
                line.clear();
                if stdout.read_line(&mut line)? == 0 {
                    return Err(Error::ContainerLost("supervisor closed its output".into()));
                }
                let v: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| Error::ContainerLost(format!("bad supervisor output: {e}")))?;
                if let Some(e) = v.get("error") {
                    return Err(Error::ContainerLost(format!("request {n} failed: {e}")));
                }
                Ok(())
            };
            let mut n = 0u64;
            for _ in 0..WARMUP_DISCARD {
                ask(n)?;
                n += 1;
            }
            barrier.wait();
            let end = Instant::now() + duration;
            let mut done = 0;
            while Instant::now() < end {
                ask(n)?;
                n += 1;
                done += 1;
            }
            drop(stdin);
            let _ = child.wait();
            Ok(done)
        }));
    }
    let mut total = 0;
    for w in workers {
        total += w.join().map_err(|_| Error::Config("scaling worker panicked".into()))??;
    }
    Ok(total as f64 / spec.duration.as_secs_f64())
}
