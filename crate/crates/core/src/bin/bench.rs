use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rewind::bench::isolation::secret_probe;
use rewind::bench::scaling::{available_cores, run_scaling, ScalingSpec};
use rewind::bench::workload::{arena_sweep, DEFAULT_ARENAS};
use rewind::bench::{run_sweep, summarize, write_csv, BenchEnv, Dirty, Load, WorkloadSpec};
use rewind::manager::Mode;

/// Microbenchmarks for the supervisor.
#[derive(Parser, Debug)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', required = true)]
    mode: Vec<Mode>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Guest executable; defaults to `refguest` next to this binary.
    #[arg(long)]
    guest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Dirty-fraction sweep at a fixed arena and arena sweep at fixed dirty count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Arena of the dirty-fraction sweep.
        #[arg(long, default_value_t = 100_000)]
        arena_pages: u64,
        /// Dirty percentages of the dirty-fraction sweep.
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
        dirty_list: Vec<u32>,
        /// Arenas of the arena sweep.
        #[arg(long, value_delimiter = ',')]
        arena_list: Option<Vec<u64>>,
        /// Dirty pages of the arena sweep.
        #[arg(long, default_value_t = 1_000)]
        dirty_count: u64,
        #[arg(long, value_delimiter = ',', default_value = "low,high")]
        load: Vec<Load>,
        /// Which sweeps to run: dirty, arena or both.
        #[arg(long, default_value = "both")]
        sweep: String,
        #[arg(long, default_value_t = 150)]
        requests: usize,
    },
    /// Throughput of 1..=N concurrent supervisor+guest pairs.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        work_ms: u64,
        #[arg(long, default_value_t = 90)]
        duration_s: u64,
    },
    /// Secret-leak probe across consecutive requests.
    Isolation {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn sibling(name: &str) -> Result<PathBuf> {
    let exe = std::env::current_exe()?;
    Ok(exe.with_file_name(name))
}

fn create(dir: &Path, name: &str) -> Result<File> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    File::create(&p).with_context(|| format!("creating {}", p.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Sweep { common, arena_pages, dirty_list, arena_list, dirty_count, load, sweep, requests } => {
            let env = BenchEnv::new(common.guest.map_or_else(|| sibling("refguest"), Ok)?);
            let mut cells = Vec::new();
            if matches!(sweep.as_str(), "dirty" | "both") {
                cells.extend(dirty_list.iter().map(|&p| (arena_pages, Dirty::Fraction(f64::from(p) / 100.0))));
            }
            if matches!(sweep.as_str(), "arena" | "both") {
                cells.extend(arena_sweep(dirty_count, arena_list.as_deref().unwrap_or(&DEFAULT_ARENAS)));
            }
            if cells.is_empty() {
                bail!("--sweep must be dirty, arena or both");
            }
            let template = WorkloadSpec {
                request_count: requests,
                repetitions: common.repetitions,
                ..WorkloadSpec::new(Mode::Gh, Load::Low, arena_pages, Dirty::Count(0))
            };
            let (results, failures) = run_sweep(&env, &common.mode, &load, &cells, &template);
            write_csv(&results, create(&common.out, "sweep.csv")?)?;
            let text = summarize(&results);
            create(&common.out, "summary.txt")?.write_all(text.as_bytes())?;
            print!("{text}");
            for (cell, e) in &failures {
                eprintln!("cell {cell} failed: {e}");
            }
            if !failures.is_empty() {
                bail!("{} of {} cells failed", failures.len(), failures.len() + results.len());
            }
        }
        Cmd::Scaling { common, pairs, work_ms, duration_s } => {
            let mut out = create(&common.out, "scaling.csv")?;
            writeln!(out, "mode,pairs,mean_rps,std_rps,pinned,cores")?;
            for mode in common.mode {
                let spec = ScalingSpec {
                    mode,
                    work_ms,
                    duration: Duration::from_secs(duration_s),
                    repetitions: common.repetitions,
                    supervisor: sibling("supervisor")?,
                    guest: common.guest.clone().map_or_else(|| sibling("refguest"), Ok)?,
                };
                let points = run_scaling(pairs, &spec)?;
                for p in &points {
                    writeln!(out, "{mode},{},{:.3},{:.3},{},{}", p.pairs, p.mean_rps, p.std_rps, p.pinned, available_cores())?;
                    println!("{mode} pairs={} throughput={:.1}/s (sd {:.1})", p.pairs, p.mean_rps, p.std_rps);
                }
                if let (Some(first), Some(last)) = (points.first(), points.last()) {
                    println!("{mode} speedup {}x pairs: {:.2}", last.pairs, last.mean_rps / first.mean_rps);
                }
            }
        }
        Cmd::Isolation { common, trials } => {
            let env = BenchEnv::new(common.guest.map_or_else(|| sibling("refguest"), Ok)?);
            let mut out = create(&common.out, "isolation.csv")?;
            writeln!(out, "mode,trials,found")?;
            for mode in common.mode {
                let r = secret_probe(&env, mode, trials, || format!("R1-{:032x}", rand::random::<u128>()))?;
                writeln!(out, "{},{},{}", r.mode, r.trials, r.found)?;
                println!("{}: secret found in {}/{} trials", r.mode, r.found, r.trials);
            }
        }
    }
    Ok(())
}
