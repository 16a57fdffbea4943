//! Argument parsing and the three subcommands.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use storwin::bench::{self, BenchConfig, BenchError, BenchMode, BenchReport, Kernel};
use storwin::runtime::{default_ranks, default_watchdog, WATCHDOG_ENV};
use storwin::storage::policy::DEFAULT_MEMORY_BUDGET;
use storwin::{FlushPolicy, StorageError, SyncMode};

use crate::exit;
use crate::recover::{self, RecoverConfig, RecoverInjection};
use crate::verify::{self, Injection, VerifyConfig};

#[derive(Debug, Parser)]
#[command(name = "storwin", version, about = "Storage-backed RMA windows: benchmarks, checks, recovery demo")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Rank count [default: $STORWIN_RANKS or 1]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub ranks: Option<u64>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Working directory for storage files.
    #[arg(long, global = true, default_value = ".")]
    pub path: PathBuf,
    /// Harness watchdog [default: $STORWIN_WATCHDOG_MS, else 30 s; 1 h for bench]
    #[arg(long, global = true)]
    pub watchdog_ms: Option<u64>,
    /// Budget the flush limits are derived from.
    #[arg(long, global = true, default_value_t = DEFAULT_MEMORY_BUDGET)]
    pub memory_budget_bytes: u64,
    #[arg(long, global = true)]
    pub dirty_limit_bytes: Option<u64>,
    #[arg(long, global = true)]
    pub background_threshold_bytes: Option<u64>,
    #[arg(long, global = true)]
    pub flush_interval_ms: Option<u64>,
    /// deferred or eager
    #[arg(long, global = true, default_value = "deferred")]
    pub sync_mode: SyncMode,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the STREAM kernels over the selected window modes.
    Bench(BenchArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Write, abandon and recover a storage window.
    RecoverDemo(RecoverArgs),
}

pub const HEADLINE_MODES: [BenchMode; 6] = [
    BenchMode::Memory,
    BenchMode::Storage,
    BenchMode::StorageBlocked,
    BenchMode::StorageBlockedSynced,
    BenchMode::ExplicitIo,
    BenchMode::ExplicitIoSynced,
];

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Elements per array and rank.
    #[arg(long, default_value_t = 10_000_000)]
    pub elements: u64,
    /// Comma-separated list of modes; hybrid runs only when asked for.
    #[arg(long, value_delimiter = ',', default_values_t = HEADLINE_MODES.to_vec())]
    pub modes: Vec<BenchMode>,
    #[arg(long, default_value_t = bench::DEFAULT_BLOCK_ELEMENTS)]
    pub block_elements: u64,
    /// Repetitions per kernel; the first one is discarded when there are two or more.
    #[arg(long, default_value_t = bench::DEFAULT_REPS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    /// Output CSV [default: <path>/bench.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random RMA programs checked against the oracle.
    #[arg(long, default_value_t = 200)]
    pub programs: u64,
    /// Deliberately break one suite (skip-sync).
    #[arg(long)]
    pub inject: Option<Injection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub phase: Phase,
    /// Window bytes per rank.
    #[arg(long, default_value_t = recover::DEFAULT_BYTES, value_parser = clap::value_parser!(u64).range(1..))]
    pub elements: u64,
    /// Damage the files before phase 2 (delete-sidecar, corrupt-sidecar, corrupt-byte).
    #[arg(long)]
    pub inject: Option<RecoverInjection>,
}

impl Common {
    fn ranks(&self) -> usize {
        self.ranks.map_or_else(default_ranks, |r| r as usize)
    }

    fn watchdog(&self, fallback: Duration) -> Duration {
        match self.watchdog_ms {
            Some(ms) => Duration::from_millis(ms),
            None if std::env::var_os(WATCHDOG_ENV).is_some() => default_watchdog(),
            None => fallback,
        }
    }

    fn policy(&self) -> Result<FlushPolicy, StorageError> {
        let mut p = FlushPolicy::from_budget(self.memory_budget_bytes).with_mode(self.sync_mode);
        if let Some(v) = self.dirty_limit_bytes {
            p.dirty_limit_bytes = v;
            p.background_threshold_bytes = p.background_threshold_bytes.min(v);
        }
        if let Some(v) = self.background_threshold_bytes {
            p.background_threshold_bytes = v;
        }
        if let Some(v) = self.flush_interval_ms {
            p.flush_interval_ms = v;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let policy = match cli.common.policy() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::USAGE;
        }
    };
    match &cli.command {
        Command::Bench(b) => cmd_bench(&cli.common, b, policy),
        Command::Verify(v) => cmd_verify(&cli.common, v),
        Command::RecoverDemo(r) => cmd_recover(&cli.common, r, policy),
    }
}

fn bench_exit(e: &BenchError) -> i32 {
    match e {
        _ if e.is_validation() => exit::CHECK,
        BenchError::SizeOverflow { .. } | BenchError::Config(_) => exit::USAGE,
        _ => exit::IO,
    }
}

fn print_speedups(report: &BenchReport) {
    let pairs = [
        (BenchMode::ExplicitIo, BenchMode::StorageBlocked),
        (BenchMode::ExplicitIoSynced, BenchMode::StorageBlockedSynced),
    ];
    for (explicit, mapped) in pairs {
        if report.mode(explicit).is_none() || report.mode(mapped).is_none() {
            continue;
        }
        let cells: Vec<String> = Kernel::ALL
            .iter()
            .map(|&k| {
                let m = bench::median(&report.paired_speedups(explicit, mapped, k));
                format!("{}={}", k.name(), m.map_or("n/a".into(), |v| format!("{v:.2}")))
            })
            .collect();
        println!("speedup {mapped} over {explicit} (median): {}", cells.join(" "));
    }
}

fn cmd_bench(common: &Common, args: &BenchArgs, policy: FlushPolicy) -> i32 {
    let cfg = BenchConfig {
        ranks: common.ranks(),
        elements: args.elements,
        block_elements: args.block_elements,
        reps: args.reps as usize,
        modes: args.modes.clone(),
        dir: common.path.clone(),
        policy,
        memory_budget: common.memory_budget_bytes,
        seed: common.seed,
        watchdog: common.watchdog(bench::BENCH_WATCHDOG),
        ..BenchConfig::default()
    };
    let csv_path = args.csv.clone().unwrap_or_else(|| common.path.join("bench.csv"));
    // open the output first so a bad path fails before the long run
    let file = match File::create(&csv_path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", csv_path.display());
            return exit::IO;
        }
    };
    info!("bench: {} ranks, {} elements, modes {:?}", cfg.ranks, cfg.elements, cfg.modes);
    let report = match bench::run_bench(&cfg) {
        Ok(r) => r,
        Err(e) => {
            error!("bench failed: {e}");
            eprintln!("error: {e}");
            return bench_exit(&e);
        }
    };
    if let Err(e) = report.write_csv(BufWriter::new(file)) {
        eprintln!("error: writing {}: {e}", csv_path.display());
        return exit::IO;
    }
    print!("{}", report.render_table());
    print_speedups(&report);
    println!("wrote {}", csv_path.display());
    exit::OK
}

fn cmd_verify(common: &Common, args: &VerifyArgs) -> i32 {
    let cfg = VerifyConfig {
        seed: common.seed,
        programs: args.programs,
        ranks: common.ranks(),
        dir: common.path.clone(),
        inject: args.inject,
    };
    let results = verify::run_all(&cfg);
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        exit::OK
    } else {
        exit::CHECK
    }
}

fn cmd_recover(common: &Common, args: &RecoverArgs, policy: FlushPolicy) -> i32 {
    let cfg = RecoverConfig {
        dir: common.path.clone(),
        ranks: common.ranks(),
        bytes: args.elements,
        seed: common.seed,
        policy,
        watchdog: common.watchdog(default_watchdog()),
    };
    if matches!(args.phase, Phase::One | Phase::Both) {
        match recover::phase1(&cfg) {
            Ok(n) => println!("phase 1: wrote {n} bytes to {}, synced, abandoned", cfg.data_path().display()),
            Err(e) => {
                eprintln!("error: {e}");
                return exit::IO;
            }
        }
    }
    if matches!(args.phase, Phase::Two | Phase::Both) {
        if let Some(fault) = args.inject {
            if let Err(e) = recover::inject(&cfg, fault) {
                eprintln!("error: injecting {fault:?}: {e}");
                return exit::IO;
            }
        }
        match recover::phase2(&cfg) {
            Ok(n) => println!("recovered {n} bytes, verified"),
            Err(e) => {
                eprintln!("error: {e}");
                return if e.is_mismatch() { exit::CHECK } else { exit::IO };
            }
        }
    }
    exit::OK
}
