//! File-backed window regions.
//!
//! A [`StorageMapping`] maps `[file_offset, file_offset + length)` of a data
//! file shared and writable, tracks which 4 KiB chunks were written since
//! their last write-back, and runs one background flusher per mapping that
//! enforces the [`FlushPolicy`]. A `.winmeta` sidecar next to the data file
//! records the region geometry and a sync epoch so a later process can
//! re-attach after a crash.

mod mapping;
pub mod policy;
pub(crate) mod region;
pub mod sidecar;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use mapping::{CreateOptions, MappingStats, StorageMapping, DIRTY_CHUNK};
pub use policy::{FlushPolicy, SyncMode};
pub use sidecar::{sidecar_path, WindowSidecar, SIDECAR_MAGIC};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("I/O failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("sidecar {} describes size {existing_size} at offset {existing_offset}, requested size {size} at offset {offset}", path.display())]
    SidecarConflict {
        path: PathBuf,
        existing_size: u64,
        existing_offset: u64,
        size: u64,
        offset: u64,
    },
    #[error("sidecar {} is missing", .0.display())]
    SidecarMissing(PathBuf),
    #[error("sidecar {} is corrupt: {reason}", path.display())]
    SidecarCorrupt { path: PathBuf, reason: String },
    #[error("expected a region of {expected} bytes, sidecar says {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("data file {} holds {actual} bytes, region needs {needed}", path.display())]
    Truncated { path: PathBuf, needed: u64, actual: u64 },
    #[error("range [{offset}, {offset}+{count}) outside mapping of {length} bytes")]
    OutOfRange { offset: usize, count: usize, length: usize },
    #[error("mapping length must be positive")]
    InvalidLength,
    #[error("invalid flush policy: {0}")]
    InvalidPolicy(String),
    #[error("mapping already closed")]
    UseAfterClose,
    #[error("background flush failed: {0}")]
    FlushFailed(String),
}

impl StorageError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        StorageError::IoFailure {
            path: path.to_owned(),
            source,
        }
    }
}
