//! Allocation hints.
//!
//! A [`HintSet`] is an ordered string map passed to `win_allocate`. Five keys
//! are understood; everything else is carried along and ignored.
//!
//! | key              | values                          | default    |
//! |------------------|---------------------------------|------------|
//! | `alloc_type`     | `memory`, `storage`, `hybrid`   | `memory`   |
//! | `storage_path`   | filesystem path                 | (required for storage/hybrid) |
//! | `storage_offset` | byte offset into the data file  | `0`        |
//! | `memory_bytes`   | bytes kept in memory (hybrid)   | `0`        |
//! | `sync_mode`      | `deferred`, `eager`             | `deferred` |

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::storage::SyncMode;
use crate::window::WindowError;

pub const ALLOC_TYPE: &str = "alloc_type";
pub const STORAGE_PATH: &str = "storage_path";
pub const STORAGE_OFFSET: &str = "storage_offset";
pub const MEMORY_BYTES: &str = "memory_bytes";
pub const SYNC_MODE: &str = "sync_mode";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintSet {
    entries: BTreeMap<String, String>,
}

impl HintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn memory() -> Self {
        Self::new().with(ALLOC_TYPE, "memory")
    }

    pub fn storage(path: impl Into<PathBuf>) -> Self {
        Self::new()
            .with(ALLOC_TYPE, "storage")
            .with(STORAGE_PATH, path.into().to_string_lossy())
    }

    pub fn hybrid(path: impl Into<PathBuf>, memory_bytes: u64) -> Self {
        Self::new()
            .with(ALLOC_TYPE, "hybrid")
            .with(STORAGE_PATH, path.into().to_string_lossy())
            .with(MEMORY_BYTES, memory_bytes.to_string())
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn parse_u64(&self, key: &str) -> Result<Option<u64>, WindowError> {
        self.get(key)
            .map(|v| {
                v.trim().parse::<u64>().map_err(|_| WindowError::InvalidHint {
                    key: key.to_owned(),
                    value: v.to_owned(),
                })
            })
            .transpose()
    }

    /// Storage sync mode requested by the hints, if any.
    pub fn sync_mode(&self) -> Result<Option<SyncMode>, WindowError> {
        self.get(SYNC_MODE)
            .map(|v| {
                v.parse().map_err(|_| WindowError::InvalidHint {
                    key: SYNC_MODE.to_owned(),
                    value: v.to_owned(),
                })
            })
            .transpose()
    }

    /// The backing these hints ask for, for a window of `size_bytes`.
    pub fn allocation_kind(&self, size_bytes: u64) -> Result<AllocationKind, WindowError> {
        let alloc_type = self.get(ALLOC_TYPE).unwrap_or("memory");
        let path = || match self.get(STORAGE_PATH) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => Err(WindowError::StoragePathInvalid),
        };
        let offset = self.parse_u64(STORAGE_OFFSET)?.unwrap_or(0);
        // validate even when unused so a typo never goes unnoticed
        let memory_bytes = self.parse_u64(MEMORY_BYTES)?;
        self.sync_mode()?;
        match alloc_type {
            "memory" => Ok(AllocationKind::Memory),
            "storage" => Ok(AllocationKind::Storage { path: path()?, offset }),
            "hybrid" => {
                let memory_bytes = memory_bytes.unwrap_or(0);
                if memory_bytes >= size_bytes {
                    return Err(WindowError::HybridSplitInvalid { memory_bytes, size_bytes });
                }
                Ok(AllocationKind::Hybrid {
                    memory_bytes,
                    path: path()?,
                    offset,
                })
            }
            other => Err(WindowError::InvalidHint {
                key: ALLOC_TYPE.to_owned(),
                value: other.to_owned(),
            }),
        }
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for HintSet {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut h = HintSet::new();
        for (k, v) in iter {
            h.set(k, v);
        }
        h
    }
}

/// Where a window's bytes live.
///
/// For storage and hybrid windows `offset` is the file offset actually used,
/// which may differ from the hinted one when ranks share a data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AllocationKind {
    Memory,
    Storage { path: PathBuf, offset: u64 },
    Hybrid { memory_bytes: u64, path: PathBuf, offset: u64 },
}

impl AllocationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationKind::Memory => "memory",
            AllocationKind::Storage { .. } => "storage",
            AllocationKind::Hybrid { .. } => "hybrid",
        }
    }

    pub fn storage_path(&self) -> Option<&PathBuf> {
        match self {
            AllocationKind::Memory => None,
            AllocationKind::Storage { path, .. } | AllocationKind::Hybrid { path, .. } => Some(path),
        }
    }

    /// Bytes kept in memory for a window of `size_bytes`.
    pub fn memory_part(&self, size_bytes: u64) -> u64 {
        match self {
            AllocationKind::Memory => size_bytes,
            AllocationKind::Storage { .. } => 0,
            AllocationKind::Hybrid { memory_bytes, .. } => *memory_bytes,
        }
    }

    /// Attribute-cache encoding (JSON).
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("allocation kind serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

impl fmt::Display for AllocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocationKind::Memory => f.write_str("memory"),
            AllocationKind::Storage { path, offset } => write!(f, "storage({}@{offset})", path.display()),
            AllocationKind::Hybrid {
                memory_bytes,
                path,
                offset,
            } => write!(f, "hybrid({memory_bytes}B memory, {}@{offset})", path.display()),
        }
    }
}
