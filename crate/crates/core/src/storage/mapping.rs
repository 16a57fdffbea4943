use std::fs::{File, OpenOptions};
use std::io;
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::policy::{FlushPolicy, SyncMode};
use super::region::MappedRegion;
use super::sidecar::{sidecar_path, WindowSidecar};
use super::StorageError;

/// Dirty tracking granularity. A write dirties every chunk it touches.
pub const DIRTY_CHUNK: usize = 4096;

const DIRTY: u8 = 1;
const FLUSHING: u8 = 2;

// Longest single flusher sleep; keeps Condvar timeouts well clear of overflow.
const MAX_FLUSHER_SLEEP: Duration = Duration::from_secs(24 * 3600);

// Serializes the check-and-extend step when several ranks share a data file.
static EXTEND_LOCK: Mutex<()> = Mutex::new(());

/// Counters exposed by a mapping. All monotonic except `dirty_bytes`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MappingStats {
    pub dirty_bytes: u64,
    pub stall_count: u64,
    pub stalled: Duration,
    pub flush_cycles: u64,
    pub last_sync_epoch: u64,
}

/// Extra knobs for [`StorageMapping::create_with`].
#[derive(Debug, Clone, Default)]
pub struct CreateOptions {
    /// Recorded in the sidecar; defaults to 1.
    pub disp_unit: Option<u64>,
    /// Sidecar location; defaults to `path` + `.winmeta`.
    pub sidecar: Option<PathBuf>,
}

/// A file-backed byte region with dirty accounting and a background flusher.
pub struct StorageMapping {
    shared: Option<Arc<Shared>>,
    flusher: Option<JoinHandle<()>>,
}

struct Shared {
    path: PathBuf,
    sidecar: PathBuf,
    file_offset: u64,
    length: usize,
    disp_unit: u64,
    policy: FlushPolicy,
    region: MappedRegion,
    state: Mutex<DirtyState>,
    // flusher waits here for work
    work: Condvar,
    // stalled writers wait here for the flusher to make progress
    progress: Condvar,
    // held for the duration of any write-back pass
    flush_gate: Mutex<()>,
}

struct DirtyState {
    chunks: Vec<u8>,
    dirty_bytes: u64,
    epoch: u64,
    stall_count: u64,
    stalled: Duration,
    flush_cycles: u64,
    wake_all: bool,
    requests: Vec<Range<usize>>,
    shutdown: bool,
    io_error: Option<String>,
}

impl DirtyState {
    fn new(length: usize, epoch: u64) -> Self {
        Self {
            chunks: vec![0; length.div_ceil(DIRTY_CHUNK)],
            dirty_bytes: 0,
            epoch,
            stall_count: 0,
            stalled: Duration::ZERO,
            flush_cycles: 0,
            wake_all: false,
            requests: Vec::new(),
            shutdown: false,
            io_error: None,
        }
    }
}

fn chunk_span(offset: usize, len: usize) -> Range<usize> {
    offset / DIRTY_CHUNK..(offset + len).div_ceil(DIRTY_CHUNK)
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, DirtyState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn chunk_len(&self, idx: usize) -> u64 {
        (self.length - idx * DIRTY_CHUNK).min(DIRTY_CHUNK) as u64
    }

    /// Marks chunks dirty; returns the number of newly dirtied bytes.
    fn mark_dirty(&self, st: &mut DirtyState, span: Range<usize>) -> u64 {
        let mut newly = 0;
        for i in span {
            if st.chunks[i] == 0 {
                newly += self.chunk_len(i);
            }
            st.chunks[i] |= DIRTY;
        }
        st.dirty_bytes += newly;
        newly
    }

    /// Moves dirty chunks in `span` to the flushing state and returns them.
    fn begin_flush(&self, st: &mut DirtyState, span: Range<usize>) -> Vec<usize> {
        let mut taken = Vec::new();
        for i in span {
            if st.chunks[i] & DIRTY != 0 {
                st.chunks[i] = (st.chunks[i] & !DIRTY) | FLUSHING;
                taken.push(i);
            }
        }
        taken
    }

    fn finish_flush(&self, st: &mut DirtyState, taken: &[usize]) {
        for &i in taken {
            st.chunks[i] &= !FLUSHING;
            if st.chunks[i] == 0 {
                st.dirty_bytes -= self.chunk_len(i);
            }
        }
    }

    /// msync each maximal run of the given (sorted) chunk indices.
    fn flush_chunks(&self, taken: &[usize]) -> io::Result<()> {
        let mut i = 0;
        while i < taken.len() {
            let start = taken[i];
            let mut end = start + 1;
            while i + 1 < taken.len() && taken[i + 1] == end {
                i += 1;
                end += 1;
            }
            i += 1;
            let lo = start * DIRTY_CHUNK;
            let hi = (end * DIRTY_CHUNK).min(self.length);
            self.region.flush(lo, hi - lo)?;
        }
        Ok(())
    }

    fn sidecar_record(&self, epoch: u64) -> WindowSidecar {
        WindowSidecar {
            size_bytes: self.length as u64,
            disp_unit: self.disp_unit,
            file_offset: self.file_offset,
            last_sync_epoch: epoch,
        }
    }

    fn sync_wait(&self, offset: usize, count: usize) -> Result<(), StorageError> {
        let _gate = self.flush_gate.lock().unwrap_or_else(|e| e.into_inner());
        let span = chunk_span(offset, count);
        let taken = {
            let mut st = self.lock();
            self.begin_flush(&mut st, span.clone())
        };
        let lo = span.start * DIRTY_CHUNK;
        let hi = (span.end * DIRTY_CHUNK).min(self.length);
        let res = self.region.flush(lo, hi - lo);
        let whole = offset == 0 && count == self.length;
        let epoch = {
            let mut st = self.lock();
            self.finish_flush(&mut st, &taken);
            self.progress.notify_all();
            if res.is_ok() && whole {
                st.epoch += 1;
            }
            st.epoch
        };
        res.map_err(|e| StorageError::io(&self.path, e))?;
        if whole {
            self.sidecar_record(epoch).write(&self.sidecar)?;
        }
        Ok(())
    }

    fn flusher_loop(self: Arc<Self>) {
        let interval = self.policy.interval().min(MAX_FLUSHER_SLEEP);
        loop {
            let (all, requests) = {
                let mut st = self.lock();
                let all;
                loop {
                    if st.shutdown {
                        return;
                    }
                    if st.wake_all || !st.requests.is_empty() {
                        all = st.wake_all;
                        break;
                    }
                    let (g, timeout) = self
                        .work
                        .wait_timeout(st, interval)
                        .unwrap_or_else(|e| e.into_inner());
                    st = g;
                    if timeout.timed_out() && st.dirty_bytes > 0 {
                        all = true;
                        break;
                    }
                }
                st.wake_all = false;
                (all, std::mem::take(&mut st.requests))
            };

            let _gate = self.flush_gate.lock().unwrap_or_else(|e| e.into_inner());
            let taken = {
                let mut st = self.lock();
                if all {
                    let n = st.chunks.len();
                    self.begin_flush(&mut st, 0..n)
                } else {
                    let mut t = Vec::new();
                    for r in requests {
                        t.extend(self.begin_flush(&mut st, r));
                    }
                    t.sort_unstable();
                    t
                }
            };
            let res = self.flush_chunks(&taken);
            let mut st = self.lock();
            self.finish_flush(&mut st, &taken);
            st.flush_cycles += 1;
            if let Err(e) = res {
                warn!("background flush of {} failed: {e}", self.path.display());
                st.io_error.get_or_insert_with(|| e.to_string());
            }
            self.progress.notify_all();
        }
    }
}

impl StorageMapping {
    /// Creates (or re-initializes) `path[file_offset, file_offset + length)`
    /// as a zero-filled window region and writes its sidecar with epoch 0.
    pub fn create(
        path: impl AsRef<Path>,
        file_offset: u64,
        length: usize,
        policy: FlushPolicy,
    ) -> Result<Self, StorageError> {
        Self::create_with(path, file_offset, length, policy, CreateOptions::default())
    }

    pub fn create_with(
        path: impl AsRef<Path>,
        file_offset: u64,
        length: usize,
        policy: FlushPolicy,
        opts: CreateOptions,
    ) -> Result<Self, StorageError> {
        let path = path.as_ref().to_owned();
        if length == 0 {
            return Err(StorageError::InvalidLength);
        }
        policy.validate()?;
        let sidecar = opts.sidecar.unwrap_or_else(|| sidecar_path(&path));
        if sidecar.exists() {
            match WindowSidecar::read(&sidecar) {
                Ok(old) if old.size_bytes != length as u64 || old.file_offset != file_offset => {
                    return Err(StorageError::SidecarConflict {
                        path: sidecar,
                        existing_size: old.size_bytes,
                        existing_offset: old.file_offset,
                        size: length as u64,
                        offset: file_offset,
                    });
                }
                Ok(_) => {}
                Err(StorageError::SidecarCorrupt { .. }) => {
                    debug!("overwriting unreadable sidecar {}", sidecar.display());
                }
                Err(e) => return Err(e),
            }
        }

        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| StorageError::io(&path, e))?;
        let end = file_offset + length as u64;
        {
            let _g = EXTEND_LOCK.lock().unwrap_or_else(|e| e.into_inner());
            let old_len = file.metadata().map_err(|e| StorageError::io(&path, e))?.len();
            if old_len < end {
                file.set_len(end).map_err(|e| StorageError::io(&path, e))?;
            }
            if old_len > file_offset {
                zero_fill(&file, file_offset, old_len.min(end) - file_offset)
                    .map_err(|e| StorageError::io(&path, e))?;
            }
        }
        let region = MappedRegion::file(&file, file_offset, length).map_err(|e| StorageError::io(&path, e))?;

        let shared = Arc::new(Shared {
            path,
            sidecar,
            file_offset,
            length,
            disp_unit: opts.disp_unit.unwrap_or(1),
            policy,
            region,
            state: Mutex::new(DirtyState::new(length, 0)),
            work: Condvar::new(),
            progress: Condvar::new(),
            flush_gate: Mutex::new(()),
        });
        shared.sidecar_record(0).write(&shared.sidecar)?;
        Ok(Self::start(shared))
    }

    /// Re-maps an existing region described by `path.winmeta` without
    /// touching its bytes.
    pub fn attach(path: impl AsRef<Path>, expected_length: Option<u64>) -> Result<Self, StorageError> {
        let path = path.as_ref();
        Self::attach_with(path, sidecar_path(path), expected_length, FlushPolicy::default())
    }

    pub fn attach_with(
        path: impl AsRef<Path>,
        sidecar: impl AsRef<Path>,
        expected_length: Option<u64>,
        policy: FlushPolicy,
    ) -> Result<Self, StorageError> {
        let path = path.as_ref().to_owned();
        let sidecar = sidecar.as_ref().to_owned();
        policy.validate()?;
        let meta = WindowSidecar::read(&sidecar)?;
        if let Some(expected) = expected_length {
            if expected != meta.size_bytes {
                return Err(StorageError::LengthMismatch {
                    expected,
                    actual: meta.size_bytes,
                });
            }
        }
        if meta.size_bytes == 0 {
            return Err(StorageError::SidecarCorrupt {
                path: sidecar,
                reason: "size_bytes is zero".into(),
            });
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|e| StorageError::io(&path, e))?;
        let actual = file.metadata().map_err(|e| StorageError::io(&path, e))?.len();
        let needed = meta.file_offset + meta.size_bytes;
        if actual < needed {
            return Err(StorageError::Truncated { path, needed, actual });
        }
        let length = meta.size_bytes as usize;
        let region =
            MappedRegion::file(&file, meta.file_offset, length).map_err(|e| StorageError::io(&path, e))?;
        let shared = Arc::new(Shared {
            path,
            sidecar,
            file_offset: meta.file_offset,
            length,
            disp_unit: meta.disp_unit,
            policy,
            region,
            state: Mutex::new(DirtyState::new(length, meta.last_sync_epoch)),
            work: Condvar::new(),
            progress: Condvar::new(),
            flush_gate: Mutex::new(()),
        });
        Ok(Self::start(shared))
    }

    fn start(shared: Arc<Shared>) -> Self {
        let s = Arc::clone(&shared);
        let flusher = thread::Builder::new()
            .name("storwin-flusher".into())
            .spawn(move || s.flusher_loop())
            .expect("spawn flusher thread");
        Self {
            shared: Some(shared),
            flusher: Some(flusher),
        }
    }

    fn live(&self) -> Result<&Shared, StorageError> {
        self.shared.as_deref().ok_or(StorageError::UseAfterClose)
    }

    fn check_range(&self, offset: usize, count: usize) -> Result<&Shared, StorageError> {
        let sh = self.live()?;
        match offset.checked_add(count) {
            Some(end) if end <= sh.length => Ok(sh),
            _ => Err(StorageError::OutOfRange {
                offset,
                count,
                length: sh.length,
            }),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.shared.is_none()
    }

    pub fn len(&self) -> usize {
        self.shared.as_ref().map_or(0, |s| s.length)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.shared.as_deref().map(|s| s.path.as_path())
    }

    pub fn sidecar_path(&self) -> Option<&Path> {
        self.shared.as_deref().map(|s| s.sidecar.as_path())
    }

    pub fn file_offset(&self) -> u64 {
        self.shared.as_ref().map_or(0, |s| s.file_offset)
    }

    pub fn disp_unit(&self) -> u64 {
        self.shared.as_ref().map_or(1, |s| s.disp_unit)
    }

    pub fn policy(&self) -> Option<FlushPolicy> {
        self.shared.as_ref().map(|s| s.policy)
    }

    pub fn stats(&self) -> MappingStats {
        let Some(sh) = self.shared.as_deref() else {
            return MappingStats::default();
        };
        let st = sh.lock();
        MappingStats {
            dirty_bytes: st.dirty_bytes,
            stall_count: st.stall_count,
            stalled: st.stalled,
            flush_cycles: st.flush_cycles,
            last_sync_epoch: st.epoch,
        }
    }

    pub fn dirty_bytes(&self) -> u64 {
        self.stats().dirty_bytes
    }

    pub fn stall_count(&self) -> u64 {
        self.stats().stall_count
    }

    pub fn last_sync_epoch(&self) -> u64 {
        self.stats().last_sync_epoch
    }

    /// Copies `bytes` into the mapping and runs the flush policy. May block
    /// when the dirty cap is reached.
    pub fn write_bytes(&self, offset: usize, bytes: &[u8]) -> Result<(), StorageError> {
        let sh = self.check_range(offset, bytes.len())?;
        if bytes.is_empty() {
            return Ok(());
        }
        sh.region.write(offset, bytes);
        self.account_write(offset, bytes.len())
    }

    pub fn read_bytes(&self, offset: usize, count: usize) -> Result<Vec<u8>, StorageError> {
        let mut out = vec![0; count];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, offset: usize, out: &mut [u8]) -> Result<(), StorageError> {
        let sh = self.check_range(offset, out.len())?;
        if !out.is_empty() {
            sh.region.read(offset, out);
        }
        Ok(())
    }

    /// Read-only view of a range.
    pub fn with_slice<R>(
        &self,
        offset: usize,
        count: usize,
        f: impl FnOnce(&[u8]) -> R,
    ) -> Result<R, StorageError> {
        let sh = self.check_range(offset, count)?;
        Ok(sh.region.with_slice(offset, count, f))
    }

    /// In-place update of a range. The whole range counts as written.
    pub fn modify<R>(
        &self,
        offset: usize,
        count: usize,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R, StorageError> {
        let sh = self.check_range(offset, count)?;
        let r = sh.region.with_slice_mut(offset, count, f);
        if count > 0 {
            self.account_write(offset, count)?;
        }
        Ok(r)
    }

    // Runs after the data guard has been released so the flusher never
    // waits on a stalled writer.
    fn account_write(&self, offset: usize, count: usize) -> Result<(), StorageError> {
        let sh = self.live()?;
        if sh.policy.mode == SyncMode::Eager {
            {
                let mut st = sh.lock();
                sh.mark_dirty(&mut st, chunk_span(offset, count));
            }
            return sh.sync_wait(offset, count);
        }
        let mut st = sh.lock();
        sh.mark_dirty(&mut st, chunk_span(offset, count));
        if st.dirty_bytes >= sh.policy.background_threshold_bytes {
            st.wake_all = true;
            sh.work.notify_one();
        }
        if st.dirty_bytes >= sh.policy.dirty_limit_bytes {
            st.stall_count += 1;
            let t0 = Instant::now();
            st.wake_all = true;
            sh.work.notify_one();
            let mut seen = st.flush_cycles;
            while st.dirty_bytes >= sh.policy.dirty_limit_bytes && !st.shutdown {
                st = sh.progress.wait(st).unwrap_or_else(|e| e.into_inner());
                // other writers refilled the budget during that pass
                if st.flush_cycles != seen && st.dirty_bytes >= sh.policy.dirty_limit_bytes {
                    seen = st.flush_cycles;
                    st.wake_all = true;
                    sh.work.notify_one();
                }
            }
            st.stalled += t0.elapsed();
        }
        Ok(())
    }

    /// Flushes a byte range. `wait = false` hands the range to the background
    /// flusher and returns immediately; `wait = true` returns once the bytes
    /// are in the file. A waited sync over the whole mapping advances the
    /// sidecar epoch.
    pub fn sync_range(&self, offset: usize, count: usize, wait: bool) -> Result<(), StorageError> {
        let sh = self.check_range(offset, count)?;
        if count == 0 {
            return Ok(());
        }
        if wait {
            sh.sync_wait(offset, count)?;
            self.take_background_error()
        } else {
            let mut st = sh.lock();
            st.requests.push(chunk_span(offset, count));
            sh.work.notify_one();
            Ok(())
        }
    }

    pub fn sync_all(&self) -> Result<(), StorageError> {
        self.sync_range(0, self.live()?.length, true)
    }

    fn take_background_error(&self) -> Result<(), StorageError> {
        let sh = self.live()?;
        match sh.lock().io_error.take() {
            Some(e) => Err(StorageError::FlushFailed(e)),
            None => Ok(()),
        }
    }

    /// Whole-mapping waited sync, then unmap. The file stays.
    pub fn close_with_flush(&mut self) -> Result<(), StorageError> {
        let res = self.sync_all();
        self.shutdown();
        res
    }

    fn shutdown(&mut self) {
        if let Some(sh) = self.shared.as_deref() {
            sh.lock().shutdown = true;
            sh.work.notify_all();
            sh.progress.notify_all();
        }
        if let Some(h) = self.flusher.take() {
            let _ = h.join();
        }
        self.shared = None;
    }
}

impl Drop for StorageMapping {
    // Abandonment: stop the flusher and unmap without syncing.
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl std::fmt::Debug for StorageMapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.shared.as_deref() {
            Some(sh) => f
                .debug_struct("StorageMapping")
                .field("path", &sh.path)
                .field("file_offset", &sh.file_offset)
                .field("length", &sh.length)
                .finish_non_exhaustive(),
            None => f.write_str("StorageMapping(closed)"),
        }
    }
}

fn zero_fill(file: &File, offset: u64, len: u64) -> io::Result<()> {
    const BUF: usize = 1 << 20;
    let zeros = vec![0u8; BUF.min(len as usize)];
    let mut done = 0u64;
    while done < len {
        let n = (len - done).min(BUF as u64) as usize;
        file.write_all_at(&zeros[..n], offset + done)?;
        done += n as u64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn quiet() -> FlushPolicy {
        FlushPolicy::stall_only(1 << 40)
    }

    #[test]
    fn create_extends_and_zero_fills() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.dat");
        let m = StorageMapping::create(&p, 0, 4096, FlushPolicy::default()).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 4096);
        assert!(m.read_bytes(0, 4096).unwrap().iter().all(|&b| b == 0));

        let p2 = dir.path().join("w2.dat");
        let _m2 = StorageMapping::create(&p2, 8192, 4096, FlushPolicy::default()).unwrap();
        assert_eq!(fs::metadata(&p2).unwrap().len(), 12288);
    }

    #[test]
    fn recreate_zeroes_previous_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.dat");
        let mut m = StorageMapping::create(&p, 0, 100, quiet()).unwrap();
        m.write_bytes(0, &[7; 100]).unwrap();
        m.close_with_flush().unwrap();
        let m = StorageMapping::create(&p, 0, 100, quiet()).unwrap();
        assert_eq!(m.read_bytes(0, 100).unwrap(), vec![0; 100]);
    }

    #[test]
    fn create_in_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope").join("w.dat");
        assert!(matches!(
            StorageMapping::create(&p, 0, 16, quiet()),
            Err(StorageError::IoFailure { .. })
        ));
    }

    #[test]
    fn zero_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            StorageMapping::create(dir.path().join("w"), 0, 0, quiet()),
            Err(StorageError::InvalidLength)
        ));
    }

    #[test]
    fn conflicting_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.dat");
        drop(StorageMapping::create(&p, 0, 4096, quiet()).unwrap());
        assert!(matches!(
            StorageMapping::create(&p, 0, 8192, quiet()),
            Err(StorageError::SidecarConflict { .. })
        ));
        assert!(matches!(
            StorageMapping::create(&p, 4096, 4096, quiet()),
            Err(StorageError::SidecarConflict { .. })
        ));
        StorageMapping::create(&p, 0, 4096, quiet()).unwrap();
    }

    #[test]
    fn read_your_writes_and_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let m = StorageMapping::create(dir.path().join("w"), 0, 64, quiet()).unwrap();
        m.write_bytes(0, &[1, 2, 3]).unwrap();
        assert_eq!(m.read_bytes(0, 3).unwrap(), [1, 2, 3]);
        assert!(matches!(m.write_bytes(64, &[1]), Err(StorageError::OutOfRange { .. })));
        assert!(matches!(m.read_bytes(63, 2), Err(StorageError::OutOfRange { .. })));
        assert!(matches!(m.sync_range(60, 8, true), Err(StorageError::OutOfRange { .. })));
        // empty write at the end is in range
        m.write_bytes(64, &[]).unwrap();
    }

    #[test]
    fn dirty_accounting_is_chunk_granular() {
        let dir = tempfile::tempdir().unwrap();
        let m = StorageMapping::create(dir.path().join("w"), 0, 3 * DIRTY_CHUNK + 100, quiet()).unwrap();
        m.write_bytes(10, &[1; 5]).unwrap();
        assert_eq!(m.dirty_bytes(), DIRTY_CHUNK as u64);
        m.write_bytes(20, &[1; 5]).unwrap();
        assert_eq!(m.dirty_bytes(), DIRTY_CHUNK as u64);
        m.write_bytes(DIRTY_CHUNK - 1, &[1; 2]).unwrap();
        assert_eq!(m.dirty_bytes(), 2 * DIRTY_CHUNK as u64);
        // last chunk only counts the bytes that exist
        m.write_bytes(3 * DIRTY_CHUNK + 99, &[1]).unwrap();
        assert_eq!(m.dirty_bytes(), 2 * DIRTY_CHUNK as u64 + 100);
        m.sync_range(0, DIRTY_CHUNK, true).unwrap();
        assert_eq!(m.dirty_bytes(), DIRTY_CHUNK as u64 + 100);
        assert_eq!(m.last_sync_epoch(), 0);
        m.sync_all().unwrap();
        assert_eq!(m.dirty_bytes(), 0);
        assert_eq!(m.last_sync_epoch(), 1);
    }

    #[test]
    fn whole_sync_advances_sidecar_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w");
        let m = StorageMapping::create(&p, 0, 128, quiet()).unwrap();
        m.sync_all().unwrap();
        m.sync_all().unwrap();
        let meta = WindowSidecar::read(&sidecar_path(&p)).unwrap();
        assert_eq!(meta.last_sync_epoch, 2);
    }

    #[test]
    fn stall_blocks_until_flusher_drains() {
        let dir = tempfile::tempdir().unwrap();
        let m = StorageMapping::create(dir.path().join("w"), 0, 2048, FlushPolicy::stall_only(1024)).unwrap();
        for i in 0..4 {
            m.write_bytes(i * 512, &[i as u8 + 1; 512]).unwrap();
        }
        // every 512-byte write dirties the single 4 KiB chunk, which alone
        // reaches the 1 KiB cap
        assert_eq!(m.stall_count(), 4);
        assert_eq!(m.dirty_bytes(), 0);
        assert!(m.stats().flush_cycles >= 4);
    }

    #[test]
    fn async_sync_is_picked_up_by_flusher() {
        let dir = tempfile::tempdir().unwrap();
        let m = StorageMapping::create(dir.path().join("w"), 0, 8192, quiet()).unwrap();
        m.write_bytes(0, &[9; 8192]).unwrap();
        m.sync_range(0, 4096, false).unwrap();
        let t0 = Instant::now();
        while m.dirty_bytes() != 4096 {
            assert!(t0.elapsed() < Duration::from_secs(10), "flusher never ran");
            thread::sleep(Duration::from_millis(1));
        }
        assert_eq!(m.last_sync_epoch(), 0);
    }

    #[test]
    fn eager_mode_keeps_nothing_dirty() {
        let dir = tempfile::tempdir().unwrap();
        let m = StorageMapping::create(dir.path().join("w"), 0, 8192, quiet().with_mode(SyncMode::Eager)).unwrap();
        m.write_bytes(100, &[1; 5000]).unwrap();
        assert_eq!(m.dirty_bytes(), 0);
        assert_eq!(m.stall_count(), 0);
    }

    #[test]
    fn close_twice_is_use_after_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w");
        let mut m = StorageMapping::create(&p, 0, 16, quiet()).unwrap();
        m.close_with_flush().unwrap();
        assert!(matches!(m.close_with_flush(), Err(StorageError::UseAfterClose)));
        assert!(matches!(m.read_bytes(0, 1), Err(StorageError::UseAfterClose)));
        // clean close still advanced the epoch
        assert_eq!(WindowSidecar::read(&sidecar_path(&p)).unwrap().last_sync_epoch, 1);
    }

    #[test]
    fn attach_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w");
        assert!(matches!(StorageMapping::attach(&p, None), Err(StorageError::SidecarMissing(_))));
        let mut m = StorageMapping::create(&p, 0, 4096, quiet()).unwrap();
        m.close_with_flush().unwrap();
        assert!(matches!(
            StorageMapping::attach(&p, Some(100)),
            Err(StorageError::LengthMismatch { expected: 100, actual: 4096 })
        ));
        let m = StorageMapping::attach(&p, Some(4096)).unwrap();
        assert_eq!(m.len(), 4096);
        assert_eq!(m.last_sync_epoch(), 1);
        drop(m);
        fs::OpenOptions::new().write(true).open(&p).unwrap().set_len(10).unwrap();
        assert!(matches!(StorageMapping::attach(&p, None), Err(StorageError::Truncated { .. })));
    }
}
