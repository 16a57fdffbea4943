//! Property suites behind `storwin verify`.
//!
//! Every suite is seeded and prints only counts and verdicts, so two runs
//! with the same seed produce the same transcript.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storwin::storage::{sidecar_path, WindowSidecar, DIRTY_CHUNK};
use storwin::window::shared_sidecar_path;
use storwin::{spawn_ranks, win_allocate, FlushPolicy, HintSet, StorageMapping, WorldConfig};

use crate::program::{self, Backing, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    /// The durability suite skips its whole-window sync.
    SkipSync,
}

impl std::str::FromStr for Injection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip-sync" => Ok(Injection::SkipSync),
            _ => Err(format!("unknown fault `{s}` (expected skip-sync)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random programs per backing in the oracle suite.
    pub programs: u64,
    pub ranks: usize,
    pub dir: PathBuf,
    pub inject: Option<Injection>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<14} {}", self.name, self.detail)
    }
}

fn result(name: &'static str, outcome: Result<String, String>) -> SuiteResult {
    match outcome {
        Ok(detail) => SuiteResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => SuiteResult {
            name,
            passed: false,
            detail,
        },
    }
}

/// Runs programs `seeds` on every backing and compares each run with the
/// oracle.
pub fn rma_oracle(seeds: std::ops::Range<u64>, dir: &Path) -> Result<String, String> {
    let n = seeds.end - seeds.start;
    for seed in seeds {
        let p = Program::generate(seed);
        let expected = p.oracle()?;
        for b in Backing::ALL {
            let got = program::run(&p, b, dir, FlushPolicy::default())
                .map_err(|e| format!("program {seed} on {}: {e}", b.name()))?;
            if got.windows != expected.windows {
                return Err(format!("program {seed} on {}: final window bytes differ", b.name()));
            }
            if got.gets != expected.gets {
                return Err(format!("program {seed} on {}: get results differ", b.name()));
            }
        }
    }
    Ok(format!("{n} programs x 3 backings match the oracle"))
}

/// Same seeded program under memory, storage and hybrid hints.
pub fn transparency(seeds: std::ops::Range<u64>, dir: &Path) -> Result<String, String> {
    let n = seeds.end - seeds.start;
    for seed in seeds {
        let p = Program::generate(seed);
        let runs = Backing::ALL
            .iter()
            .map(|&b| program::run(&p, b, dir, FlushPolicy::default()).map_err(|e| format!("program {seed}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if runs.iter().any(|r| r != &runs[0]) {
            return Err(format!("program {seed}: contents differ between backings"));
        }
    }
    Ok(format!("{n} programs identical across memory, storage, hybrid"))
}

pub fn pattern(seed: u64, rank: usize, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut v = vec![0; len];
    rng.fill(&mut v[..]);
    v
}

/// Writes, syncs, abandons, re-attaches and compares.
pub fn durability(seed: u64, ranks: usize, dir: &Path, inject: Option<Injection>) -> Result<String, String> {
    let scratch = dir.join("durability");
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).map_err(|e| e.to_string())?;
    let path = scratch.join("durable.dat");
    let len = 40_000usize;
    let world = WorldConfig::default().with_watchdog(Duration::from_secs(30));
    spawn_ranks(ranks, world, |ctx| -> Result<(), String> {
        let w = win_allocate(len as u64, 1, &HintSet::storage(&path), &ctx).map_err(|e| e.to_string())?;
        w.local_write(0, &pattern(seed, ctx.rank(), len)).map_err(|e| e.to_string())?;
        if inject != Some(Injection::SkipSync) {
            w.local_sync(true).map_err(|e| e.to_string())?;
        }
        std::mem::forget(w);
        Ok(())
    })
    .map_err(|e| e.to_string())?;

    let outcome = (|| {
        for r in 0..ranks {
            let sc = if ranks == 1 {
                sidecar_path(&path)
            } else {
                shared_sidecar_path(&path, r)
            };
            let meta = WindowSidecar::read(&sc).map_err(|e| e.to_string())?;
            if meta.last_sync_epoch == 0 {
                return Err(format!("rank {r}: no completed sync recorded; contents not guaranteed"));
            }
            let m = StorageMapping::attach_with(&path, &sc, Some(len as u64), FlushPolicy::default())
                .map_err(|e| e.to_string())?;
            let got = m.read_bytes(0, len).map_err(|e| e.to_string())?;
            if got != pattern(seed, r, len) {
                let at = got.iter().zip(pattern(seed, r, len)).position(|(a, b)| *a != b).unwrap_or(0);
                return Err(format!("rank {r}: byte {at} differs after re-attach"));
            }
        }
        Ok(format!("{ranks} ranks x {len} bytes recovered bit-exact after abandonment"))
    })();
    let _ = fs::remove_dir_all(&scratch);
    outcome
}

/// A put across the hybrid split: only the storage half reaches the file.
pub fn hybrid_routing(dir: &Path) -> Result<String, String> {
    let scratch = dir.join("hybrid");
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).map_err(|e| e.to_string())?;
    let path = scratch.join("hybrid.dat");
    let (size, split, offset, at, n) = (4096u64, 1024u64, 8192u64, 1000u64, 48usize);
    let data: Vec<u8> = (0..n).map(|i| i as u8 + 1).collect();
    let world = WorldConfig::default().with_watchdog(Duration::from_secs(30));
    let run = spawn_ranks(2, world, |ctx| -> Result<(), String> {
        let hints = if ctx.rank() == 1 {
            HintSet::hybrid(&path, split).with(storwin::hints::STORAGE_OFFSET, offset.to_string())
        } else {
            HintSet::memory()
        };
        let size = if ctx.rank() == 1 { size } else { 0 };
        let mut w = win_allocate(size, 1, &hints, &ctx).map_err(|e| e.to_string())?;
        w.fence().map_err(|e| e.to_string())?;
        if ctx.rank() == 0 {
            w.put(&data, 1, at).map_err(|e| e.to_string())?;
        }
        w.fence_close().map_err(|e| e.to_string())?;
        w.free().map_err(|e| e.to_string())
    });
    let outcome = run.map_err(|e| e.to_string()).and_then(|_| {
        let file = fs::read(&path).map_err(|e| e.to_string())?;
        let expected_len = (offset + size - split) as usize;
        if file.len() != expected_len {
            return Err(format!("file holds {} bytes, expected {expected_len}", file.len()));
        }
        let high = (split - at) as usize;
        let base = offset as usize;
        if file[base..base + n - high] != data[high..] {
            return Err("storage half of the put is not at the file offset".into());
        }
        if file.iter().enumerate().any(|(i, &b)| b != 0 && !(base..base + n - high).contains(&i)) {
            return Err("memory half of the put leaked into the file".into());
        }
        Ok(format!("{} bytes in memory, {} bytes in file at offset {offset}", high, n - high))
    });
    let _ = fs::remove_dir_all(&scratch);
    outcome
}

/// Single-threaded replay of the flush-policy counters for sequential writes
/// of `write` bytes covering `total` bytes of a `total`-byte mapping, under
/// a policy whose flusher only runs once a writer reaches the limit.
pub fn stall_oracle(total: usize, write: usize, limit: u64) -> u64 {
    let mut dirty = BTreeSet::new();
    let chunk_bytes = |c: usize| (DIRTY_CHUNK.min(total - c * DIRTY_CHUNK)) as u64;
    let mut stalls = 0;
    let mut off = 0;
    while off < total {
        let end = (off + write).min(total);
        dirty.extend(off / DIRTY_CHUNK..end.div_ceil(DIRTY_CHUNK));
        if dirty.iter().map(|&c| chunk_bytes(c)).sum::<u64>() >= limit {
            stalls += 1;
            dirty.clear();
        }
        off = end;
    }
    stalls
}

pub const POLICY_WORKLOAD: usize = 4 << 20;
pub const POLICY_WRITE: usize = 64 << 10;
pub const POLICY_LIMITS: [u64; 3] = [64 << 10, 1 << 20, 64 << 20];

/// Stall counts of the sequential workload at each limit, measured.
pub fn measured_stalls(dir: &Path) -> Result<Vec<u64>, String> {
    let mut counts = Vec::new();
    for (i, limit) in POLICY_LIMITS.into_iter().enumerate() {
        let path = dir.join(format!("policy{i}.dat"));
        let mut m = StorageMapping::create(&path, 0, POLICY_WORKLOAD, FlushPolicy::stall_only(limit))
            .map_err(|e| e.to_string())?;
        let block = vec![0xC3; POLICY_WRITE];
        for off in (0..POLICY_WORKLOAD).step_by(POLICY_WRITE) {
            m.write_bytes(off, &block).map_err(|e| e.to_string())?;
        }
        counts.push(m.stall_count());
        m.close_with_flush().map_err(|e| e.to_string())?;
        let _ = fs::remove_file(&path);
        let _ = fs::remove_file(sidecar_path(&path));
    }
    Ok(counts)
}

pub fn flush_policy(dir: &Path) -> Result<String, String> {
    let counts = measured_stalls(dir)?;
    let oracle: Vec<u64> = POLICY_LIMITS
        .iter()
        .map(|&l| stall_oracle(POLICY_WORKLOAD, POLICY_WRITE, l))
        .collect();
    let summary = POLICY_LIMITS
        .iter()
        .zip(&counts)
        .map(|(l, c)| format!("{}KiB:{c}", l >> 10))
        .collect::<Vec<_>>()
        .join(" ");
    if counts != oracle {
        return Err(format!("stalls {summary} differ from oracle {oracle:?}"));
    }
    if counts[0] == 0 || *counts.last().unwrap() != 0 || counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(format!("stalls {summary} do not fall with the limit"));
    }
    Ok(format!("stalls {summary} match the oracle"))
}

/// Runs every suite in a fixed order.
pub fn run_all(cfg: &VerifyConfig) -> Vec<SuiteResult> {
    let dir = cfg.dir.join("storwin-verify");
    let _ = fs::remove_dir_all(&dir);
    if let Err(e) = fs::create_dir_all(&dir) {
        return vec![SuiteResult {
            name: "setup",
            passed: false,
            detail: e.to_string(),
        }];
    }
    let seeds = cfg.seed..cfg.seed + cfg.programs;
    let few = cfg.seed..cfg.seed + cfg.programs.min(50);
    let out = vec![
        result("rma-oracle", rma_oracle(seeds, &dir)),
        result("transparency", transparency(few, &dir)),
        result("durability", durability(cfg.seed, cfg.ranks, &dir, cfg.inject)),
        result("hybrid-routing", hybrid_routing(&dir)),
        result("flush-policy", flush_policy(&dir)),
    ];
    let _ = fs::remove_dir_all(&dir);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        // 2048 bytes in 512-byte writes against a 1024-byte limit: every
        // write fills a whole chunk, so each one reaches the limit
        assert_eq!(stall_oracle(2048, 512, 1024), 4);
        assert_eq!(stall_oracle(POLICY_WORKLOAD, POLICY_WRITE, 64 << 10), 64);
        assert_eq!(stall_oracle(POLICY_WORKLOAD, POLICY_WRITE, 1 << 20), 4);
        assert_eq!(stall_oracle(POLICY_WORKLOAD, POLICY_WRITE, 64 << 20), 0);
    }

    #[test]
    fn skip_sync_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(durability(3, 2, dir.path(), None).is_ok());
        let e = durability(3, 2, dir.path(), Some(Injection::SkipSync)).unwrap_err();
        assert!(e.contains("no completed sync"), "{e}");
    }

    #[test]
    fn hybrid_suite_passes() {
        let dir = tempfile::tempdir().unwrap();
        let d = hybrid_routing(dir.path()).unwrap();
        assert!(d.contains("24 bytes in memory"), "{d}");
    }
}
