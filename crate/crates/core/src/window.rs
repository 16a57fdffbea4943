//! Windows: allocation, the attribute cache, and deallocation.
//!
//! `win_allocate` inspects the hints to decide where a rank's window lives,
//! creates the backing (anonymous memory, a storage mapping, or both split at
//! `memory_bytes`), caches the allocation kind under
//! [`ALLOC_KIND_ATTR`], and registers the window group with the runtime once
//! every rank has succeeded. `Window::free` reads that attribute back to
//! decide how to release the backing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock, RwLockReadGuard};

use log::debug;
use thiserror::Error;

use crate::hints::{AllocationKind, HintSet};
use crate::runtime::{RankContext, RuntimeError, World};
use crate::storage::region::MappedRegion;
use crate::storage::{sidecar_path, CreateOptions, MappingStats, StorageError, StorageMapping};

/// Attribute under which the allocation kind is cached on every window.
pub const ALLOC_KIND_ATTR: &str = "storwin.alloc_kind";
/// Attribute keys with this prefix belong to the runtime.
pub const RESERVED_PREFIX: &str = "storwin.";

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid hint {key}={value}")]
    InvalidHint { key: String, value: String },
    #[error("storage and hybrid windows need a non-empty storage_path hint")]
    StoragePathInvalid,
    #[error("hybrid split {memory_bytes} must be below the window size {size_bytes}")]
    HybridSplitInvalid { memory_bytes: u64, size_bytes: u64 },
    #[error("displacement unit {disp_unit} does not divide window size {size_bytes}")]
    InvalidDispUnit { disp_unit: u64, size_bytes: u64 },
    #[error("allocation failed on rank {rank}: {cause}")]
    AllocationFailed { rank: usize, cause: String },
    #[error("an access epoch is still open on the window")]
    EpochOpen,
    #[error("write-back during free failed: {0}")]
    FlushFailed(#[source] StorageError),
    #[error("window already freed")]
    Freed,
    #[error("attribute key `{0}` is reserved")]
    ReservedKey(String),
    #[error("attribute key must not be empty")]
    EmptyKey,
    #[error("local access [{offset}, {offset}+{len}) outside window of {size} bytes")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Snapshot of one rank's window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowDescriptor {
    pub win_id: u64,
    pub rank: usize,
    pub size_bytes: u64,
    pub disp_unit: u64,
    pub kind: AllocationKind,
    pub attributes: BTreeMap<String, Vec<u8>>,
}

pub(crate) enum Backing {
    Empty,
    Memory(MappedRegion),
    Storage(StorageMapping),
    Hybrid { memory: MappedRegion, storage: StorageMapping },
    Released,
}

/// One contiguous piece of a window's address range.
#[derive(Clone, Copy)]
pub(crate) enum Segment<'a> {
    Memory(&'a MappedRegion),
    Storage(&'a StorageMapping),
}

impl Segment<'_> {
    pub(crate) fn read(&self, offset: usize, out: &mut [u8]) -> Result<(), StorageError> {
        match self {
            Segment::Memory(r) => {
                r.read(offset, out);
                Ok(())
            }
            Segment::Storage(m) => m.read_into(offset, out),
        }
    }

    pub(crate) fn write(&self, offset: usize, data: &[u8]) -> Result<(), StorageError> {
        match self {
            Segment::Memory(r) => {
                r.write(offset, data);
                Ok(())
            }
            Segment::Storage(m) => m.write_bytes(offset, data),
        }
    }

    pub(crate) fn with_slice<R>(&self, offset: usize, len: usize, f: impl FnOnce(&[u8]) -> R) -> Result<R, StorageError> {
        match self {
            Segment::Memory(r) => Ok(r.with_slice(offset, len, f)),
            Segment::Storage(m) => m.with_slice(offset, len, f),
        }
    }

    pub(crate) fn modify<R>(&self, offset: usize, len: usize, f: impl FnOnce(&mut [u8]) -> R) -> Result<R, StorageError> {
        match self {
            Segment::Memory(r) => Ok(r.with_slice_mut(offset, len, f)),
            Segment::Storage(m) => m.modify(offset, len, f),
        }
    }

    pub(crate) fn sync(&self, offset: usize, len: usize, wait: bool) -> Result<(), StorageError> {
        match self {
            Segment::Memory(_) => Ok(()),
            Segment::Storage(m) => m.sync_range(offset, len, wait),
        }
    }
}

/// A piece of a byte range that falls inside a single segment.
pub(crate) struct Piece<'a> {
    pub segment: Segment<'a>,
    /// Offset inside the segment.
    pub seg_offset: usize,
    /// Offset relative to the start of the requested range.
    pub range_offset: usize,
    pub len: usize,
}

impl Backing {
    fn layout(&self) -> Vec<(usize, usize, Segment<'_>)> {
        match self {
            Backing::Empty | Backing::Released => Vec::new(),
            Backing::Memory(r) => vec![(0, r.len(), Segment::Memory(r))],
            Backing::Storage(m) => vec![(0, m.len(), Segment::Storage(m))],
            Backing::Hybrid { memory, storage } => vec![
                (0, memory.len(), Segment::Memory(memory)),
                (memory.len(), storage.len(), Segment::Storage(storage)),
            ],
        }
    }

    /// Splits `[offset, offset + len)` at segment boundaries.
    pub(crate) fn pieces(&self, offset: usize, len: usize) -> Vec<Piece<'_>> {
        let end = offset + len;
        self.layout()
            .into_iter()
            .filter_map(|(start, seg_len, segment)| {
                let lo = offset.max(start);
                let hi = end.min(start + seg_len);
                (lo < hi).then(|| Piece {
                    segment,
                    seg_offset: lo - start,
                    range_offset: lo - offset,
                    len: hi - lo,
                })
            })
            .collect()
    }

    fn mappings(&self) -> impl Iterator<Item = &StorageMapping> {
        match self {
            Backing::Storage(m) | Backing::Hybrid { storage: m, .. } => Some(m),
            _ => None,
        }
        .into_iter()
    }
}

#[derive(Default)]
pub(crate) struct PassiveLock {
    pub exclusive: Option<usize>,
    pub shared: usize,
}

/// One rank's exposed region, visible to every rank of the group.
pub struct WindowMember {
    pub(crate) rank: usize,
    pub(crate) size: u64,
    pub(crate) disp_unit: u64,
    pub(crate) kind: AllocationKind,
    pub(crate) backing: RwLock<Backing>,
    pub(crate) attributes: RwLock<BTreeMap<String, Vec<u8>>>,
    // serializes read-modify-write accumulates into this member
    pub(crate) accumulate: Mutex<()>,
    pub(crate) passive: Mutex<PassiveLock>,
    pub(crate) passive_cv: Condvar,
}

impl WindowMember {
    pub(crate) fn backing(&self) -> RwLockReadGuard<'_, Backing> {
        self.backing.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn disp_unit(&self) -> u64 {
        self.disp_unit
    }

    pub fn kind(&self) -> &AllocationKind {
        &self.kind
    }

    pub(crate) fn read(&self, offset: usize, out: &mut [u8]) -> Result<(), StorageError> {
        let b = self.backing();
        for p in b.pieces(offset, out.len()) {
            p.segment.read(p.seg_offset, &mut out[p.range_offset..p.range_offset + p.len])?;
        }
        Ok(())
    }

    pub(crate) fn write(&self, offset: usize, data: &[u8]) -> Result<(), StorageError> {
        let b = self.backing();
        for p in b.pieces(offset, data.len()) {
            p.segment.write(p.seg_offset, &data[p.range_offset..p.range_offset + p.len])?;
        }
        Ok(())
    }
}

/// All members of one window, indexed by rank.
pub struct WindowGroup {
    pub(crate) id: u64,
    pub(crate) members: Vec<Arc<WindowMember>>,
}

impl WindowGroup {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn member(&self, rank: usize) -> Option<&Arc<WindowMember>> {
        self.members.get(rank)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub(crate) struct EpochState {
    pub fence: bool,
    /// target rank → exclusive
    pub locks: BTreeMap<usize, bool>,
}

impl EpochState {
    pub(crate) fn is_open(&self) -> bool {
        self.fence || !self.locks.is_empty()
    }
}

/// A rank's handle on a window.
pub struct Window {
    pub(crate) id: u64,
    pub(crate) rank: usize,
    pub(crate) group: Arc<WindowGroup>,
    pub(crate) world: Arc<World>,
    pub(crate) epoch: Mutex<EpochState>,
    pub(crate) freed: bool,
}

impl std::fmt::Debug for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Window")
            .field("id", &self.id)
            .field("rank", &self.rank)
            .field("kind", &self.local().kind)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
struct Placement {
    valid: bool,
    path: Option<PathBuf>,
    file_len: u64,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_owned())
}

/// Sidecar for rank `rank` when several ranks share one data file.
pub fn shared_sidecar_path(path: &Path, rank: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".r{rank}"));
    sidecar_path(Path::new(&s))
}

/// Collective window allocation.
///
/// Every rank of `ctx`'s group must call this; sizes and hints may differ.
/// Returns once every rank's backing exists and the window is registered.
/// If any rank fails, all ranks get an error and nothing is registered.
pub fn win_allocate(size_bytes: u64, disp_unit: u64, hints: &HintSet, ctx: &RankContext) -> Result<Window, WindowError> {
    let win_id = ctx.next_window_id();
    let rank = ctx.rank();

    let requested = (|| {
        if disp_unit == 0 || (size_bytes > 0 && !size_bytes.is_multiple_of(disp_unit)) {
            return Err(WindowError::InvalidDispUnit { disp_unit, size_bytes });
        }
        let sync_mode = hints.sync_mode()?;
        Ok((hints.allocation_kind(size_bytes)?, sync_mode))
    })();

    let placement = match &requested {
        Ok((kind, _)) => Placement {
            valid: true,
            path: kind.storage_path().map(|p| absolute(p)),
            file_len: size_bytes - kind.memory_part(size_bytes),
        },
        Err(_) => Placement {
            valid: false,
            path: None,
            file_len: 0,
        },
    };
    let placements = ctx.all_gather(placement)?;
    let (kind, sync_mode) = requested?;
    if let Some(bad) = placements.iter().position(|p| !p.valid) {
        return Err(WindowError::AllocationFailed {
            rank: bad,
            cause: "invalid allocation arguments".into(),
        });
    }

    // ranks sharing a data file get consecutive, non-overlapping regions
    let own_path = placements[rank].path.clone();
    let sharers: Vec<usize> = (0..ctx.size())
        .filter(|&r| own_path.is_some() && placements[r].path == own_path && placements[r].file_len > 0)
        .collect();
    let shift: u64 = sharers.iter().filter(|&&r| r < rank).map(|&r| placements[r].file_len).sum();
    let kind = match kind {
        AllocationKind::Memory => AllocationKind::Memory,
        AllocationKind::Storage { path, offset } => AllocationKind::Storage {
            path,
            offset: offset + shift,
        },
        AllocationKind::Hybrid {
            memory_bytes,
            path,
            offset,
        } => AllocationKind::Hybrid {
            memory_bytes,
            path,
            offset: offset + shift,
        },
    };
    let sidecar = own_path.as_ref().map(|p| {
        if sharers.len() > 1 {
            shared_sidecar_path(p, rank)
        } else {
            sidecar_path(p)
        }
    });

    let mut policy = ctx.config().policy;
    if let Some(m) = sync_mode {
        policy.mode = m;
    }
    let built = build_backing(size_bytes, disp_unit, &kind, sidecar, policy).map_err(|e| e.to_string());
    let member = built.map(|backing| {
        let mut attributes = BTreeMap::new();
        attributes.insert(ALLOC_KIND_ATTR.to_owned(), kind.encode());
        Arc::new(WindowMember {
            rank,
            size: size_bytes,
            disp_unit,
            kind: kind.clone(),
            backing: RwLock::new(backing),
            attributes: RwLock::new(attributes),
            accumulate: Mutex::new(()),
            passive: Mutex::new(PassiveLock::default()),
            passive_cv: Condvar::new(),
        })
    });
    let members = ctx.all_gather(member)?;
    if let Some((bad, Err(cause))) = members.iter().enumerate().find(|(_, m)| m.is_err()) {
        return Err(WindowError::AllocationFailed {
            rank: bad,
            cause: cause.clone(),
        });
    }
    let members: Vec<Arc<WindowMember>> = members.into_iter().map(|m| m.expect("checked")).collect();

    if rank == 0 {
        ctx.world().registry().insert(
            win_id,
            Arc::new(WindowGroup {
                id: win_id,
                members,
            }),
        );
    }
    ctx.barrier()?;
    let group = ctx
        .world()
        .registry()
        .get(win_id)
        .expect("window registered by rank 0 before the barrier");
    debug!("rank {rank}: allocated window {win_id} as {kind}");
    Ok(Window {
        id: win_id,
        rank,
        group,
        world: Arc::clone(ctx.world()),
        epoch: Mutex::new(EpochState::default()),
        freed: false,
    })
}

fn build_backing(
    size: u64,
    disp_unit: u64,
    kind: &AllocationKind,
    sidecar: Option<PathBuf>,
    policy: crate::storage::FlushPolicy,
) -> Result<Backing, WindowError> {
    let size = size as usize;
    if size == 0 {
        return Ok(Backing::Empty);
    }
    let opts = || CreateOptions {
        disp_unit: Some(disp_unit),
        sidecar: sidecar.clone(),
    };
    let anon = |len| MappedRegion::anonymous(len).map_err(|e| StorageError::io(Path::new("<anonymous>"), e));
    Ok(match kind {
        AllocationKind::Memory => Backing::Memory(anon(size)?),
        AllocationKind::Storage { path, offset } => {
            Backing::Storage(StorageMapping::create_with(path, *offset, size, policy, opts())?)
        }
        AllocationKind::Hybrid {
            memory_bytes,
            path,
            offset,
        } => {
            let mem = *memory_bytes as usize;
            if mem == 0 {
                // nothing stays in memory; the layout is a plain storage window
                return Ok(Backing::Storage(StorageMapping::create_with(path, *offset, size, policy, opts())?));
            }
            let memory = anon(mem)?;
            let storage = StorageMapping::create_with(path, *offset, size - mem, policy, opts())?;
            Backing::Hybrid { memory, storage }
        }
    })
}

impl Window {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn group_size(&self) -> usize {
        self.group.len()
    }

    pub(crate) fn local(&self) -> &WindowMember {
        &self.group.members[self.rank]
    }

    pub(crate) fn target(&self, rank: usize) -> Option<&WindowMember> {
        self.group.members.get(rank).map(|m| &**m)
    }

    pub fn size_bytes(&self) -> u64 {
        self.local().size
    }

    pub fn disp_unit(&self) -> u64 {
        self.local().disp_unit
    }

    pub fn kind(&self) -> &AllocationKind {
        &self.local().kind
    }

    pub fn is_freed(&self) -> bool {
        self.freed
    }

    /// Size of `rank`'s member, if the rank exists.
    pub fn target_size(&self, rank: usize) -> Option<u64> {
        self.target(rank).map(|m| m.size)
    }

    pub fn descriptor(&self) -> WindowDescriptor {
        let m = self.local();
        WindowDescriptor {
            win_id: self.id,
            rank: self.rank,
            size_bytes: m.size,
            disp_unit: m.disp_unit,
            kind: m.kind.clone(),
            attributes: m.attributes.read().unwrap_or_else(|e| e.into_inner()).clone(),
        }
    }

    pub fn attr_get(&self, key: &str) -> Option<Vec<u8>> {
        self.local()
            .attributes
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
    }

    pub fn attr_set(&self, key: &str, value: impl Into<Vec<u8>>) -> Result<(), WindowError> {
        if key.is_empty() {
            return Err(WindowError::EmptyKey);
        }
        if key.starts_with(RESERVED_PREFIX) {
            return Err(WindowError::ReservedKey(key.to_owned()));
        }
        self.local()
            .attributes
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.to_owned(), value.into());
        Ok(())
    }

    fn check_local(&self, offset: u64, len: u64) -> Result<(), WindowError> {
        if self.freed {
            return Err(WindowError::Freed);
        }
        let size = self.local().size;
        if offset.checked_add(len).is_none_or(|end| end > size) {
            return Err(WindowError::OutOfRange { offset, len, size });
        }
        Ok(())
    }

    /// Owner load from the local window, outside any epoch.
    pub fn local_read(&self, offset: u64, len: usize) -> Result<Vec<u8>, WindowError> {
        self.check_local(offset, len as u64)?;
        let mut out = vec![0; len];
        self.local().read(offset as usize, &mut out)?;
        Ok(out)
    }

    /// Owner store into the local window, outside any epoch.
    pub fn local_write(&self, offset: u64, data: &[u8]) -> Result<(), WindowError> {
        self.check_local(offset, data.len() as u64)?;
        self.local().write(offset as usize, data)?;
        Ok(())
    }

    /// Flushes the storage-backed part of a local byte range.
    pub fn local_sync_range(&self, offset: u64, len: u64, wait: bool) -> Result<(), WindowError> {
        self.check_local(offset, len)?;
        let b = self.local().backing();
        for p in b.pieces(offset as usize, len as usize) {
            p.segment.sync(p.seg_offset, p.len, wait)?;
        }
        Ok(())
    }

    /// Flushes the whole storage-backed part of the local window.
    pub fn local_sync(&self, wait: bool) -> Result<(), WindowError> {
        self.local_sync_range(0, self.local().size, wait)
    }

    /// Counters of the local storage mapping (zero for memory windows).
    pub fn storage_stats(&self) -> MappingStats {
        let b = self.local().backing();
        let stats = b.mappings().next().map(StorageMapping::stats).unwrap_or_default();
        stats
    }

    /// Collective deallocation.
    ///
    /// Fails locally with [`WindowError::EpochOpen`] (without entering the
    /// collective) while a fence or lock epoch is open. Storage-backed parts
    /// are written back before they are unmapped; a write-back failure is
    /// reported after the window has been deregistered.
    pub fn free(&mut self) -> Result<(), WindowError> {
        if self.freed {
            return Err(WindowError::Freed);
        }
        if self.epoch.lock().unwrap_or_else(|e| e.into_inner()).is_open() {
            return Err(WindowError::EpochOpen);
        }
        let ctx_rank = self.rank;
        self.world_barrier()?;

        let local = self.local();
        let kind = local
            .attributes
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(ALLOC_KIND_ATTR)
            .and_then(|v| AllocationKind::decode(v))
            .unwrap_or_else(|| local.kind.clone());
        let backing = std::mem::replace(
            &mut *local.backing.write().unwrap_or_else(|e| e.into_inner()),
            Backing::Released,
        );
        let flushed = match (kind, backing) {
            (AllocationKind::Memory, b) => {
                drop(b);
                Ok(())
            }
            (_, Backing::Storage(mut m)) | (_, Backing::Hybrid { storage: mut m, .. }) => m.close_with_flush(),
            (_, b) => {
                drop(b);
                Ok(())
            }
        };
        self.freed = true;

        self.world_barrier()?;
        if ctx_rank == 0 {
            self.world.registry().remove(self.id);
        }
        self.world_barrier()?;
        flushed.map_err(WindowError::FlushFailed)
    }

    pub(crate) fn world_barrier(&self) -> Result<(), RuntimeError> {
        self.world.barrier(self.rank)
    }
}
