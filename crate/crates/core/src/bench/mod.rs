//! STREAM over windows.
//!
//! Each rank owns a contiguous, block-aligned slice of the arrays `a`, `b`
//! and `c`, held in three windows of the mode's kind (or in plain files for
//! the explicit-I/O baseline). Every pass is bracketed by barriers and timed
//! as the slowest rank; results are checked on a sampled index set against
//! the scalar recurrence before the time is kept.

pub mod arrays;
pub mod explicit;
pub mod kernels;
pub mod stats;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::runtime::{spawn_ranks, HarnessError, RankContext, RuntimeError, WorldConfig};
use crate::storage::policy::DEFAULT_MEMORY_BUDGET;
use crate::rma::RmaError;
use crate::storage::{FlushPolicy, StorageError};
use crate::window::WindowError;

pub use arrays::{ArrayBacking, WindowArrays};
pub use explicit::FileArrays;
pub use kernels::{Kernel, ScalarState, DEFAULT_SCALAR};
pub use stats::{bandwidth, measured_reps, median, summarize, Summary};

pub const DEFAULT_BLOCK_ELEMENTS: u64 = 1_000_000;
pub const DEFAULT_REPS: usize = 10;
/// Indices checked per pass when the arrays are larger than this.
pub const SAMPLE_SIZE: usize = 1000;
pub const CSV_HEADER: &str = "mode,kernel,elements,block_elements,rep,seconds,mb_per_s,stall_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchMode {
    Memory,
    Storage,
    StorageBlocked,
    StorageBlockedSynced,
    ExplicitIo,
    ExplicitIoSynced,
    Hybrid,
}

impl BenchMode {
    pub const ALL: [BenchMode; 7] = [
        BenchMode::Memory,
        BenchMode::Storage,
        BenchMode::StorageBlocked,
        BenchMode::StorageBlockedSynced,
        BenchMode::ExplicitIo,
        BenchMode::ExplicitIoSynced,
        BenchMode::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Memory => "memory",
            BenchMode::Storage => "storage",
            BenchMode::StorageBlocked => "storage_blocked",
            BenchMode::StorageBlockedSynced => "storage_blocked_synced",
            BenchMode::ExplicitIo => "explicit_io",
            BenchMode::ExplicitIoSynced => "explicit_io_synced",
            BenchMode::Hybrid => "hybrid",
        }
    }

    fn backing(self) -> Option<ArrayBacking> {
        match self {
            BenchMode::Memory => Some(ArrayBacking::Memory),
            BenchMode::Storage | BenchMode::StorageBlocked | BenchMode::StorageBlockedSynced => {
                Some(ArrayBacking::Storage)
            }
            BenchMode::Hybrid => Some(ArrayBacking::Hybrid),
            BenchMode::ExplicitIo | BenchMode::ExplicitIoSynced => None,
        }
    }

    pub fn touches_storage(self) -> bool {
        self != BenchMode::Memory
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

impl Serialize for BenchMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub elements: u64,
    pub scalar: f64,
    pub reps: usize,
}

impl KernelSpec {
    pub fn new(kernel: Kernel, elements: u64) -> Self {
        Self {
            kernel,
            elements,
            scalar: DEFAULT_SCALAR,
            reps: DEFAULT_REPS,
        }
    }

    pub fn bytes_moved(&self) -> u64 {
        self.kernel.bytes_moved(self.elements)
    }
}

/// A sampled element that did not hold the value the recurrence predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationFailure {
    pub kernel: Kernel,
    pub rep: usize,
    pub index: u64,
    pub expected: f64,
    pub actual: f64,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} rep {}: element {} is {} but should be {}",
            self.kernel, self.rep, self.index, self.actual, self.expected
        )
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("arrays need {bytes} bytes but the memory budget is {budget}")]
    SizeOverflow { bytes: u64, budget: u64 },
    #[error("validation failed in {mode} mode: {failure}")]
    Validation { mode: BenchMode, failure: ValidationFailure },
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Rma(#[from] RmaError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl BenchError {
    pub fn is_validation(&self) -> bool {
        matches!(self, BenchError::Validation { .. })
    }
}

/// Indices checked after every pass: all of them for small arrays, otherwise
/// [`SAMPLE_SIZE`] distinct ones including both ends.
pub fn sample_indices(elements: u64, seed: u64) -> Vec<u64> {
    if elements <= SAMPLE_SIZE as u64 {
        return (0..elements).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::from([0, elements - 1]);
    while set.len() < SAMPLE_SIZE {
        set.insert(rng.random_range(0..elements));
    }
    set.into_iter().collect()
}

/// Elements `[lo, hi)` owned by `rank`; boundaries fall on block multiples.
pub fn rank_slice(elements: u64, block: u64, ranks: usize, rank: usize) -> (u64, u64) {
    let block = block.max(1);
    let blocks = elements.div_ceil(block);
    let (r, n) = (rank as u64, ranks as u64);
    let lo = (blocks * r / n * block).min(elements);
    let hi = (blocks * (r + 1) / n * block).min(elements);
    (lo, hi)
}

/// The arrays of one rank.
pub enum Arrays {
    Windows(WindowArrays),
    Files(FileArrays),
}

impl Arrays {
    pub fn len(&self) -> usize {
        match self {
            Arrays::Windows(w) => w.len(),
            Arrays::Files(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_element(&self, array: usize, index: usize) -> Result<f64, BenchError> {
        match self {
            Arrays::Windows(w) => w.read_element(array, index),
            Arrays::Files(f) => f.read_element(array, index),
        }
    }

    pub fn read_all(&self, array: usize) -> Result<Vec<f64>, BenchError> {
        match self {
            Arrays::Windows(w) => w.read_all(array),
            Arrays::Files(f) => f.read_all(array),
        }
    }

    pub fn stall_count(&self) -> u64 {
        match self {
            Arrays::Windows(w) => w.stall_count(),
            Arrays::Files(_) => 0,
        }
    }

    /// Writes back whatever is still dirty and waits for it.
    pub fn flush(&self) -> Result<(), BenchError> {
        if let Arrays::Windows(w) = self {
            for array in 0..3 {
                w.window(array).local_sync(true)?;
            }
        }
        Ok(())
    }

    /// Collective for windows; deletes the files of the explicit baseline.
    pub fn release(self) -> Result<(), BenchError> {
        match self {
            Arrays::Windows(w) => w.free(),
            Arrays::Files(f) => f.remove(),
        }
    }
}

fn blocked_pass(
    arrays: &WindowArrays,
    kernel: Kernel,
    scalar: f64,
    block: usize,
    sync_each_block: bool,
    wait: bool,
) -> Result<(), BenchError> {
    let len = arrays.len();
    let block = block.max(1);
    let mut lo = 0;
    while lo < len {
        let hi = len.min(lo + block);
        arrays.apply(kernel, scalar, lo, hi)?;
        if sync_each_block {
            arrays.sync_output(kernel, lo, hi, wait)?;
        }
        lo = hi;
    }
    // the last dirty pages are part of the kernel's cost
    arrays.window(kernel.output()).local_sync(true)?;
    Ok(())
}

/// One timed pass of `kernel` in `mode`.
pub fn pass(arrays: &Arrays, mode: BenchMode, kernel: Kernel, scalar: f64, block: usize) -> Result<(), BenchError> {
    match (mode, arrays) {
        (BenchMode::StorageBlocked, Arrays::Windows(w)) => blocked_pass(w, kernel, scalar, block, true, false),
        (BenchMode::StorageBlockedSynced, Arrays::Windows(w)) => blocked_pass(w, kernel, scalar, block, true, true),
        (_, Arrays::Windows(w)) => w.apply(kernel, scalar, 0, w.len()),
        (BenchMode::ExplicitIoSynced, Arrays::Files(f)) => f.pass(kernel, scalar, block, true),
        (_, Arrays::Files(f)) => f.pass(kernel, scalar, block, false),
    }
}

/// Checks local `samples` after `kernel` ran; `model` already includes it.
pub fn validate(
    arrays: &Arrays,
    kernel: Kernel,
    scalar: f64,
    model: &ScalarState,
    samples: &[usize],
    rep: usize,
    global_offset: u64,
) -> Result<Option<ValidationFailure>, BenchError> {
    let expected = model.values[kernel.output()];
    for &i in samples {
        let actual = arrays.read_element(kernel.output(), i)?;
        let ins = kernel
            .inputs()
            .iter()
            .map(|&a| arrays.read_element(a, i))
            .collect::<Result<Vec<_>, _>>()?;
        let related = kernel.element(scalar, &ins);
        if actual.to_bits() != expected.to_bits() || related.to_bits() != actual.to_bits() {
            return Ok(Some(ValidationFailure {
                kernel,
                rep,
                index: global_offset + i as u64,
                expected,
                actual,
            }));
        }
    }
    Ok(None)
}

fn timed_reps(
    arrays: &Arrays,
    mode: BenchMode,
    spec: &KernelSpec,
    model: &mut ScalarState,
    samples: &[usize],
    run: impl Fn() -> Result<(), BenchError>,
) -> Result<Vec<f64>, BenchError> {
    let mut times = Vec::with_capacity(spec.reps);
    for rep in 0..spec.reps {
        let t0 = Instant::now();
        run()?;
        let dt = t0.elapsed().as_secs_f64();
        model.step(spec.kernel, spec.scalar);
        if let Some(failure) = validate(arrays, spec.kernel, spec.scalar, model, samples, rep, 0)? {
            return Err(BenchError::Validation { mode, failure });
        }
        times.push(dt);
    }
    Ok(times)
}

fn windows_of(arrays: &Arrays) -> Result<&WindowArrays, BenchError> {
    match arrays {
        Arrays::Windows(w) => Ok(w),
        Arrays::Files(_) => Err(BenchError::Config("window arrays required".into())),
    }
}

/// Repeats one whole-array kernel on this rank's window arrays and returns
/// the per-rep times. `model` tracks the expected array values.
pub fn run_kernel(
    spec: &KernelSpec,
    arrays: &Arrays,
    model: &mut ScalarState,
    samples: &[usize],
) -> Result<Vec<f64>, BenchError> {
    let w = windows_of(arrays)?;
    let mode = match w.window(0).kind().name() {
        "memory" => BenchMode::Memory,
        "hybrid" => BenchMode::Hybrid,
        _ => BenchMode::Storage,
    };
    timed_reps(arrays, mode, spec, model, samples, || w.apply(spec.kernel, spec.scalar, 0, w.len()))
}

/// Like [`run_kernel`] but block by block, optionally flushing each block's
/// output with or without waiting.
pub fn run_blocked(
    spec: &KernelSpec,
    arrays: &Arrays,
    block_elements: usize,
    sync_each_block: bool,
    wait: bool,
    model: &mut ScalarState,
    samples: &[usize],
) -> Result<Vec<f64>, BenchError> {
    let w = windows_of(arrays)?;
    let mode = if wait {
        BenchMode::StorageBlockedSynced
    } else {
        BenchMode::StorageBlocked
    };
    timed_reps(arrays, mode, spec, model, samples, || {
        blocked_pass(w, spec.kernel, spec.scalar, block_elements, sync_each_block, wait)
    })
}

/// The explicit-I/O baseline over plain files.
pub fn run_explicit_io(
    spec: &KernelSpec,
    arrays: &Arrays,
    block_elements: usize,
    synced: bool,
    model: &mut ScalarState,
    samples: &[usize],
) -> Result<Vec<f64>, BenchError> {
    let Arrays::Files(f) = arrays else {
        return Err(BenchError::Config("explicit I/O needs file arrays".into()));
    };
    let mode = if synced {
        BenchMode::ExplicitIoSynced
    } else {
        BenchMode::ExplicitIo
    };
    timed_reps(arrays, mode, spec, model, samples, || f.pass(spec.kernel, spec.scalar, block_elements, synced))
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub ranks: usize,
    pub elements: u64,
    pub block_elements: u64,
    pub reps: usize,
    pub scalar: f64,
    pub modes: Vec<BenchMode>,
    /// Scratch directory; each mode works in its own subdirectory, removed
    /// afterwards.
    pub dir: PathBuf,
    pub policy: FlushPolicy,
    pub memory_budget: u64,
    pub seed: u64,
    pub watchdog: Duration,
    /// Keep a copy of the final arrays in the report.
    pub capture_arrays: bool,
}

/// Benchmark runs are long; the harness default would cut them short.
pub const BENCH_WATCHDOG: Duration = Duration::from_secs(3600);

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ranks: 1,
            elements: 10_000_000,
            block_elements: DEFAULT_BLOCK_ELEMENTS,
            reps: DEFAULT_REPS,
            scalar: DEFAULT_SCALAR,
            modes: vec![BenchMode::Memory, BenchMode::Storage],
            dir: std::env::temp_dir(),
            policy: FlushPolicy::default(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
            seed: 0,
            watchdog: BENCH_WATCHDOG,
            capture_arrays: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_owned()));
        if self.ranks == 0 {
            return bad("ranks must be at least 1");
        }
        if self.elements == 0 {
            return bad("elements must be at least 1");
        }
        if self.block_elements == 0 {
            return bad("block_elements must be at least 1");
        }
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.modes.is_empty() {
            return bad("no modes selected");
        }
        self.policy
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))
    }
}

/// Results of one mode.
#[derive(Debug, Clone)]
pub struct ModeReport {
    pub mode: BenchMode,
    /// Seconds per rep, per kernel in [`Kernel::ALL`] order.
    pub times: Vec<[f64; 4]>,
    /// Writer stalls per rep and kernel, summed over ranks.
    pub stalls: Vec<[u64; 4]>,
    /// Wall time from the first pass to the end of the final write-back.
    pub total_seconds: f64,
    /// Final `[a, b, c]`, when captured.
    pub arrays: Option<[Vec<f64>; 3]>,
}

fn kernel_index(kernel: Kernel) -> usize {
    Kernel::ALL.iter().position(|&k| k == kernel).expect("kernel listed")
}

impl ModeReport {
    pub fn kernel_times(&self, kernel: Kernel) -> Vec<f64> {
        let k = kernel_index(kernel);
        self.times.iter().map(|t| t[k]).collect()
    }

    /// Times that enter the statistics (warm-up dropped).
    pub fn measured_times(&self, kernel: Kernel) -> Vec<f64> {
        let all = self.kernel_times(kernel);
        all[measured_reps(all.len())].to_vec()
    }

    /// The discarded first rep, if one was discarded.
    pub fn warmup_time(&self, kernel: Kernel) -> Option<f64> {
        (self.times.len() >= 2).then(|| self.times[0][kernel_index(kernel)])
    }

    pub fn stall_total(&self, kernel: Kernel) -> u64 {
        let k = kernel_index(kernel);
        self.stalls.iter().map(|s| s[k]).sum()
    }

    pub fn summary(&self, kernel: Kernel, elements: u64) -> Option<Summary> {
        summarize(kernel, elements, &self.measured_times(kernel))
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub mode: BenchMode,
    pub kernel: Kernel,
    pub elements: u64,
    pub block_elements: u64,
    pub rep: usize,
    pub seconds: f64,
    pub mb_per_s: f64,
    pub stall_count: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub ranks: usize,
    pub elements: u64,
    pub block_elements: u64,
    pub reps: usize,
    pub modes: Vec<ModeReport>,
}

/// Speedup of a mapped mode over explicit I/O.
pub fn speedup(explicit_seconds: f64, mapped_seconds: f64) -> f64 {
    explicit_seconds / mapped_seconds
}

impl BenchReport {
    pub fn mode(&self, mode: BenchMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Every rep of every mode and kernel, warm-up included.
    pub fn records(&self) -> Vec<RepRecord> {
        let mut out = Vec::new();
        for m in &self.modes {
            for (rep, (times, stalls)) in m.times.iter().zip(&m.stalls).enumerate() {
                for (k, kernel) in Kernel::ALL.into_iter().enumerate() {
                    out.push(RepRecord {
                        mode: m.mode,
                        kernel,
                        elements: self.elements,
                        block_elements: self.block_elements,
                        rep,
                        seconds: times[k],
                        mb_per_s: bandwidth(kernel, self.elements, times[k]),
                        stall_count: stalls[k],
                    });
                }
            }
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for r in self.records() {
            wr.serialize(r)?;
        }
        if self.modes.iter().all(|m| m.times.is_empty()) {
            wr.write_record(CSV_HEADER.split(','))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Per-rep ratios of explicit to mapped time for `kernel`, over the
    /// measured reps both modes ran.
    pub fn paired_speedups(&self, explicit: BenchMode, mapped: BenchMode, kernel: Kernel) -> Vec<f64> {
        let (Some(e), Some(m)) = (self.mode(explicit), self.mode(mapped)) else {
            return Vec::new();
        };
        e.measured_times(kernel)
            .into_iter()
            .zip(m.measured_times(kernel))
            .map(|(te, tm)| speedup(te, tm))
            .collect()
    }

    /// Human-readable table: mean ± stddev per mode and kernel.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<24}{:<7}{:>14}{:>14}{:>12}{:>12}{:>8}\n",
            "mode", "kernel", "MB/s mean", "± stddev", "best MB/s", "mean s", "stalls"
        );
        for m in &self.modes {
            for kernel in Kernel::ALL {
                let Some(sum) = m.summary(kernel, self.elements) else {
                    continue;
                };
                let sd = sum
                    .stddev_mb_per_s
                    .map_or_else(|| "n/a".to_owned(), |v| format!("{v:.1}"));
                s.push_str(&format!(
                    "{:<24}{:<7}{:>14.1}{:>14}{:>12.1}{:>12.6}{:>8}\n",
                    m.mode.name(),
                    kernel.name(),
                    sum.mean_mb_per_s,
                    sd,
                    sum.best_mb_per_s,
                    sum.mean_seconds,
                    m.stall_total(kernel)
                ));
            }
            s.push_str(&format!("{:<24}total {:.3} s\n", m.mode.name(), m.total_seconds));
        }
        s
    }
}

struct RankOutcome {
    times: Vec<[f64; 4]>,
    stalls: Vec<[u64; 4]>,
    total_seconds: f64,
    failure: Option<ValidationFailure>,
    arrays: Option<[Vec<f64>; 3]>,
}

fn mode_dir(cfg: &BenchConfig, mode: BenchMode) -> PathBuf {
    cfg.dir.join(format!("storwin-bench-{}", mode.name()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_owned(),
        source,
    }
}

fn rank_main(cfg: &BenchConfig, mode: BenchMode, dir: &Path, ctx: &RankContext) -> Result<RankOutcome, BenchError> {
    let (lo, hi) = rank_slice(cfg.elements, cfg.block_elements, ctx.size(), ctx.rank());
    let len = (hi - lo) as usize;
    let block = cfg.block_elements as usize;
    let arrays = match mode.backing() {
        Some(backing) => {
            let w = WindowArrays::allocate(ctx, len, backing, dir, cfg.policy.mode)?;
            w.initialize()?;
            Arrays::Windows(w)
        }
        None => Arrays::Files(FileArrays::create(dir, ctx.rank(), len)?),
    };
    let samples: Vec<usize> = sample_indices(cfg.elements, cfg.seed)
        .into_iter()
        .filter(|&i| i >= lo && i < hi)
        .map(|i| (i - lo) as usize)
        .collect();

    let mut model = ScalarState::default();
    let mut times = Vec::with_capacity(cfg.reps);
    let mut stalls = Vec::with_capacity(cfg.reps);
    let mut failure = None;
    ctx.barrier()?;
    let started = Instant::now();
    'reps: for rep in 0..cfg.reps {
        let mut t = [0.0; 4];
        let mut st = [0; 4];
        for (k, kernel) in Kernel::ALL.into_iter().enumerate() {
            let stalls_before = arrays.stall_count();
            let blocked = matches!(mode, BenchMode::StorageBlocked | BenchMode::StorageBlockedSynced);
            let w = match &arrays {
                Arrays::Windows(w) if blocked => Some(w.window(kernel.output())),
                _ => None,
            };
            ctx.barrier()?;
            if let Some(w) = w {
                w.fence()?;
            }
            let t0 = Instant::now();
            pass(&arrays, mode, kernel, cfg.scalar, block)?;
            let dt = t0.elapsed().as_secs_f64();
            if let Some(w) = w {
                w.fence_close()?;
            }
            model.step(kernel, cfg.scalar);
            let mine = validate(&arrays, kernel, cfg.scalar, &model, &samples, rep, lo)?;
            let all = ctx.all_gather((dt, arrays.stall_count() - stalls_before, mine))?;
            t[k] = all.iter().map(|a| a.0).fold(0.0, f64::max);
            st[k] = all.iter().map(|a| a.1).sum();
            if let Some(f) = all.into_iter().find_map(|a| a.2) {
                failure = Some(f);
                break 'reps;
            }
        }
        times.push(t);
        stalls.push(st);
    }
    arrays.flush()?;
    ctx.barrier()?;
    let total_seconds = started.elapsed().as_secs_f64();

    let captured = if cfg.capture_arrays && failure.is_none() {
        let mine = [arrays.read_all(0)?, arrays.read_all(1)?, arrays.read_all(2)?];
        let all = ctx.all_gather(mine)?;
        let mut out: [Vec<f64>; 3] = Default::default();
        for part in all {
            for (o, p) in out.iter_mut().zip(part) {
                o.extend(p);
            }
        }
        Some(out)
    } else {
        None
    };
    arrays.release()?;
    Ok(RankOutcome {
        times,
        stalls,
        total_seconds,
        failure,
        arrays: captured,
    })
}

/// Runs one mode on `cfg.ranks` ranks.
pub fn run_mode(cfg: &BenchConfig, mode: BenchMode) -> Result<ModeReport, BenchError> {
    cfg.validate()?;
    if mode == BenchMode::Memory {
        let bytes = 3 * 8 * cfg.elements;
        if bytes > cfg.memory_budget {
            return Err(BenchError::SizeOverflow {
                bytes,
                budget: cfg.memory_budget,
            });
        }
    }
    let dir = mode_dir(cfg, mode);
    if mode.touches_storage() {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let world = WorldConfig::default()
        .with_watchdog(cfg.watchdog)
        .with_policy(cfg.policy);
    let out = spawn_ranks(cfg.ranks, world, |ctx| rank_main(cfg, mode, &dir, &ctx));
    if mode.touches_storage() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    let mut results = out?.results;
    let first = results.swap_remove(0);
    if let Some(failure) = first.failure {
        return Err(BenchError::Validation { mode, failure });
    }
    Ok(ModeReport {
        mode,
        times: first.times,
        stalls: first.stalls,
        total_seconds: first.total_seconds,
        arrays: first.arrays,
    })
}

/// Runs every configured mode in order.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let modes = cfg
        .modes
        .iter()
        .map(|&m| run_mode(cfg, m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchReport {
        ranks: cfg.ranks,
        elements: cfg.elements,
        block_elements: cfg.block_elements,
        reps: cfg.reps,
        modes,
    })
}
