//! Crash-and-recover demo: phase 1 writes a seeded pattern into storage
//! windows, syncs and exits without freeing; phase 2 re-attaches through the
//! sidecars and checks every byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use storwin::storage::{sidecar_path, SIDECAR_MAGIC};
use storwin::window::shared_sidecar_path;
use storwin::{spawn_ranks, win_allocate, FlushPolicy, HintSet, StorageError, StorageMapping, WorldConfig};

use crate::verify::pattern;

pub const DEFAULT_BYTES: u64 = 1 << 20;
pub const DATA_FILE: &str = "recover.dat";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoverInjection {
    DeleteSidecar,
    CorruptSidecar,
    CorruptByte,
}

impl std::str::FromStr for RecoverInjection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delete-sidecar" => Ok(Self::DeleteSidecar),
            "corrupt-sidecar" => Ok(Self::CorruptSidecar),
            "corrupt-byte" => Ok(Self::CorruptByte),
            _ => Err(format!(
                "unknown fault `{s}` (expected delete-sidecar, corrupt-sidecar or corrupt-byte)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecoverConfig {
    pub dir: PathBuf,
    pub ranks: usize,
    pub bytes: u64,
    pub seed: u64,
    pub policy: FlushPolicy,
    pub watchdog: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum RecoverError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Window(#[from] storwin::WindowError),
    #[error(transparent)]
    Harness(#[from] storwin::HarnessError),
    #[error("I/O on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("rank {rank}: byte {offset} is {actual:#04x}, expected {expected:#04x}")]
    Mismatch {
        rank: usize,
        offset: usize,
        expected: u8,
        actual: u8,
    },
}

impl RecoverError {
    pub fn is_mismatch(&self) -> bool {
        matches!(self, RecoverError::Mismatch { .. })
    }
}

impl RecoverConfig {
    pub fn data_path(&self) -> PathBuf {
        self.dir.join(DATA_FILE)
    }

    pub fn sidecar(&self, rank: usize) -> PathBuf {
        if self.ranks == 1 {
            sidecar_path(&self.data_path())
        } else {
            shared_sidecar_path(&self.data_path(), rank)
        }
    }

    fn clear(&self) {
        let _ = fs::remove_file(self.data_path());
        let _ = fs::remove_file(sidecar_path(&self.data_path()));
        for r in 0..self.ranks {
            let _ = fs::remove_file(shared_sidecar_path(&self.data_path(), r));
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> RecoverError {
    RecoverError::Io(path.display().to_string(), e)
}

/// Writes the pattern, waits for a whole-window sync and abandons the
/// windows without freeing them. Returns the bytes written over all ranks.
pub fn phase1(cfg: &RecoverConfig) -> Result<u64, RecoverError> {
    fs::create_dir_all(&cfg.dir).map_err(|e| io(&cfg.dir, e))?;
    cfg.clear();
    let world = WorldConfig::default()
        .with_watchdog(cfg.watchdog)
        .with_policy(cfg.policy);
    let path = cfg.data_path();
    spawn_ranks(cfg.ranks, world, |ctx| -> Result<(), storwin::WindowError> {
        let w = win_allocate(cfg.bytes, 1, &HintSet::storage(&path), &ctx)?;
        w.local_write(0, &pattern(cfg.seed, ctx.rank(), cfg.bytes as usize))?;
        w.local_sync(true)?;
        // simulate the process dying here
        std::mem::forget(w);
        Ok(())
    })?;
    Ok(cfg.bytes * cfg.ranks as u64)
}

/// Damages the files left by phase 1.
pub fn inject(cfg: &RecoverConfig, fault: RecoverInjection) -> Result<(), RecoverError> {
    let sc = cfg.sidecar(0);
    match fault {
        RecoverInjection::DeleteSidecar => fs::remove_file(&sc).map_err(|e| io(&sc, e)),
        RecoverInjection::CorruptSidecar => {
            let text = fs::read_to_string(&sc).map_err(|e| io(&sc, e))?;
            let bad = text.replace(SIDECAR_MAGIC, "XXXX0");
            fs::write(&sc, bad).map_err(|e| io(&sc, e))
        }
        RecoverInjection::CorruptByte => {
            use std::os::unix::fs::FileExt;
            let meta = storwin::storage::WindowSidecar::read(&sc)?;
            let path = cfg.data_path();
            let f = fs::OpenOptions::new()
                .read(true)
                .write(true)
                .open(&path)
                .map_err(|e| io(&path, e))?;
            let at = meta.file_offset + cfg.bytes / 2;
            let mut b = [0u8];
            f.read_exact_at(&mut b, at).map_err(|e| io(&path, e))?;
            f.write_all_at(&[!b[0]], at).map_err(|e| io(&path, e))?;
            f.sync_data().map_err(|e| io(&path, e))
        }
    }
}

/// Re-attaches every rank's region and compares it with the pattern.
pub fn phase2(cfg: &RecoverConfig) -> Result<u64, RecoverError> {
    let path = cfg.data_path();
    let mut total = 0;
    for r in 0..cfg.ranks {
        let mut m = StorageMapping::attach_with(&path, cfg.sidecar(r), Some(cfg.bytes), cfg.policy)?;
        let got = m.read_bytes(0, cfg.bytes as usize)?;
        let want = pattern(cfg.seed, r, cfg.bytes as usize);
        if let Some(offset) = got.iter().zip(&want).position(|(a, b)| a != b) {
            return Err(RecoverError::Mismatch {
                rank: r,
                offset,
                expected: want[offset],
                actual: got[offset],
            });
        }
        m.close_with_flush()?;
        total += got.len() as u64;
    }
    Ok(total)
}
