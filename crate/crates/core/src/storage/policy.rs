//! Dirty-byte flush policy.
//!
//! The kernel's page-cache writeback is governed by a hard dirty limit (writers
//! stall there), a lower background threshold (asynchronous writeback starts
//! there) and a periodic flusher wakeup. `FlushPolicy` carries the same three
//! knobs and the storage layer enforces them with its own accounting, so the
//! mechanism is observable and testable without touching `vm.*` sysctls.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::StorageError;

/// Default memory budget the percentage-based limits are derived from (1 GiB).
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;
/// Hard dirty cap as a percentage of the memory budget.
pub const DIRTY_LIMIT_PERCENT: u64 = 20;
/// Background writeback threshold as a percentage of the memory budget.
pub const BACKGROUND_THRESHOLD_PERCENT: u64 = 10;
/// Periodic flusher wakeup.
pub const DEFAULT_FLUSH_INTERVAL_MS: u64 = 15_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    /// Dirty bytes are written back by the flusher or explicit syncs.
    #[default]
    Deferred,
    /// Every write is followed by a synchronous flush of the written range.
    Eager,
}

impl SyncMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Deferred => "deferred",
            SyncMode::Eager => "eager",
        }
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyncMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deferred" => Ok(SyncMode::Deferred),
            "eager" => Ok(SyncMode::Eager),
            other => Err(format!("unknown sync mode `{other}` (expected deferred|eager)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushPolicy {
    pub dirty_limit_bytes: u64,
    pub background_threshold_bytes: u64,
    pub flush_interval_ms: u64,
    pub mode: SyncMode,
}

impl Default for FlushPolicy {
    fn default() -> Self {
        Self::from_budget(DEFAULT_MEMORY_BUDGET)
    }
}

impl FlushPolicy {
    /// Limits derived from a memory budget: 20% dirty cap, 10% background
    /// threshold, 15 s flusher interval.
    pub fn from_budget(memory_budget_bytes: u64) -> Self {
        let pct = |p: u64| ((memory_budget_bytes as u128 * p as u128) / 100).max(1) as u64;
        Self {
            dirty_limit_bytes: pct(DIRTY_LIMIT_PERCENT),
            background_threshold_bytes: pct(BACKGROUND_THRESHOLD_PERCENT),
            flush_interval_ms: DEFAULT_FLUSH_INTERVAL_MS,
            mode: SyncMode::Deferred,
        }
    }

    /// A policy whose flusher only runs when a writer hits the cap.
    ///
    /// With `background_threshold == dirty_limit` and a long interval the
    /// number of stalls is a pure function of the write sequence.
    pub fn stall_only(dirty_limit_bytes: u64) -> Self {
        Self {
            dirty_limit_bytes,
            background_threshold_bytes: dirty_limit_bytes,
            flush_interval_ms: u64::MAX / 4,
            mode: SyncMode::Deferred,
        }
    }

    pub fn with_mode(mut self, mode: SyncMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), StorageError> {
        if self.dirty_limit_bytes == 0 {
            return Err(StorageError::InvalidPolicy("dirty_limit_bytes must be positive".into()));
        }
        if self.background_threshold_bytes == 0 {
            return Err(StorageError::InvalidPolicy(
                "background_threshold_bytes must be positive".into(),
            ));
        }
        if self.flush_interval_ms == 0 {
            return Err(StorageError::InvalidPolicy("flush_interval_ms must be positive".into()));
        }
        if self.background_threshold_bytes > self.dirty_limit_bytes {
            return Err(StorageError::InvalidPolicy(format!(
                "background threshold {} exceeds dirty limit {}",
                self.background_threshold_bytes, self.dirty_limit_bytes
            )));
        }
        Ok(())
    }

    pub(crate) fn interval(&self) -> Duration {
        Duration::from_millis(self.flush_interval_ms)
    }
}
