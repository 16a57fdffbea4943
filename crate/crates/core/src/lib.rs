//! One-sided communication windows whose bytes live in memory, in a
//! memory-mapped file, or split across both.
//!
//! Ranks run as threads of one process ([`runtime`]). Each rank allocates its
//! part of a window collectively with [`win_allocate`]; the [`HintSet`] picks
//! the backing. Other ranks then access it with put/get/accumulate inside
//! fence or lock epochs ([`rma`]). Storage-backed windows go through
//! [`storage::StorageMapping`], which enforces a dirty-byte flush policy and
//! keeps a sidecar so a later process can re-attach after a crash.
//! [`bench`] runs the STREAM kernels over such windows.

pub mod bench;
pub mod hints;
pub mod rma;
pub mod runtime;
pub mod storage;
pub mod window;

pub use hints::{AllocationKind, HintSet};
pub use rma::{Combiner, RmaError, RmaOp, RmaRequest};
pub use runtime::{spawn_ranks, HarnessError, HarnessOutput, RankContext, RuntimeError, WorldConfig};
pub use storage::{FlushPolicy, StorageError, StorageMapping, SyncMode};
pub use window::{win_allocate, Window, WindowDescriptor, WindowError, ALLOC_KIND_ATTR};
