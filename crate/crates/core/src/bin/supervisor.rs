use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{ArgAction, Parser};
use log::{error, info};

use rewind::manager::protocol::RequestEnvelope;
use rewind::manager::serve::serve;
use rewind::manager::{FdPolicy, GuestHandle, ManagerConfig, Mode, SpawnConfig};
use rewind::restore::RestoreOrder;
use rewind::Error;

const EXIT_DIVERGED: u8 = 2;
const EXIT_STARTUP: u8 = 3;
const EXIT_CONFIG: u8 = 4;

/// Runs a worker process and rolls it back to its warm state after every request.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    /// base, gh, gh-nop or fork.
    #[arg(long)]
    mode: Mode,
    /// Warm-up request: a full request line or a bare JSON value.
    #[arg(long, value_name = "FILE")]
    dummy_input: PathBuf,
    /// Skip rollback between consecutive requests with the same "domain".
    #[arg(long)]
    skip_same_domain: bool,
    /// Descriptors opened by a request are fatal (default).
    #[arg(long, conflicts_with = "permissive_fds")]
    strict_fds: bool,
    /// Descriptors opened by a request are logged and kept.
    #[arg(long)]
    permissive_fds: bool,
    /// Zero every present stack page on restore, not only written ones.
    #[arg(long)]
    zero_full_stack: bool,
    /// Drop newly paged memory before restoring registers.
    #[arg(long)]
    madvise_first: bool,
    /// Exclude writable shared mappings from the snapshot instead of refusing.
    #[arg(long)]
    allow_shared_writable: bool,
    #[arg(long, value_name = "N")]
    run_as_uid: Option<u32>,
    #[arg(long, value_name = "N")]
    run_as_gid: Option<u32>,
    #[arg(long, value_name = "N")]
    max_queue: Option<usize>,
    #[arg(long, value_name = "N", default_value_t = 300)]
    timeout_s: u64,
    /// Per-request metrics as JSON lines.
    #[arg(long, value_name = "FILE")]
    stats_out: Option<PathBuf>,
    /// Wait for the guest's 0x06 byte on fd 3 before rolling back.
    #[arg(long)]
    direct_signal: bool,
    /// Guest command line.
    #[arg(last = true, required = true, num_args = 1.., action = ArgAction::Append)]
    command: Vec<String>,
}

fn startup_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ModeUnsupported(_) => EXIT_CONFIG,
        _ => EXIT_STARTUP,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let dummy = match std::fs::read_to_string(&cli.dummy_input) {
        Ok(text) => match RequestEnvelope::dummy(&text) {
            Ok(d) => d,
            Err(e) => {
                error!("{}: {e}", cli.dummy_input.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        Err(e) => {
            error!("cannot read {}: {e}", cli.dummy_input.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let stats: Option<Box<dyn Write>> = match &cli.stats_out {
        Some(p) => match File::create(p) {
            Ok(f) => Some(Box::new(BufWriter::new(f))),
            Err(e) => {
                error!("cannot create {}: {e}", p.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => None,
    };

    let mut spawn = SpawnConfig::new(&cli.command[0], cli.command[1..].to_vec());
    spawn.run_as_uid = cli.run_as_uid;
    spawn.run_as_gid = cli.run_as_gid;
    let mut cfg = ManagerConfig::new(cli.mode, spawn);
    cfg.skip_same_domain = cli.skip_same_domain;
    cfg.fd_policy = if cli.permissive_fds { FdPolicy::Permissive } else { FdPolicy::Strict };
    cfg.restore.zero_full_stack = cli.zero_full_stack;
    if cli.madvise_first {
        cfg.restore.order = RestoreOrder::MadviseFirst;
    }
    cfg.snapshot.allow_shared_writable = cli.allow_shared_writable;
    cfg.timeout = Duration::from_secs(cli.timeout_s);
    cfg.max_queue = cli.max_queue;
    cfg.direct_signal = cli.direct_signal;

    let mut guest = match GuestHandle::start(cfg, &dummy) {
        Ok(g) => g,
        Err(e) => {
            error!("startup failed: {e}");
            return ExitCode::from(startup_code(&e));
        }
    };

    let outcome = serve(&mut guest, std::io::stdin(), std::io::stdout(), stats, cli.max_queue);
    match outcome {
        Ok(summary) => {
            info!("served {} requests ({} rejected)", summary.served, summary.rejected);
            let _ = guest.shutdown();
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("guest lost: {e}");
            let _ = guest.shutdown();
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}
