//! A mapped byte region shared between threads.
//!
//! Both anonymous (memory) and file-backed windows end up as a `MappedRegion`.
//! Rust-level access to the bytes is serialized through an `RwLock<()>` guard,
//! while kernel-level operations (`msync`) go through the raw mapping and can
//! run concurrently with readers and writers.

use std::fs::File;
use std::io;
use std::sync::RwLock;

use memmap2::{MmapOptions, MmapRaw};

pub(crate) struct MappedRegion {
    map: MmapRaw,
    len: usize,
    guard: RwLock<()>,
}

// SAFETY: every dereference of the raw pointer happens while holding `guard`
// (shared for reads, exclusive for writes), so the bytes are never aliased
// mutably across threads. msync only hands the address range to the kernel.
unsafe impl Send for MappedRegion {}
unsafe impl Sync for MappedRegion {}

impl MappedRegion {
    /// Anonymous zero-filled region. `len` must be non-zero.
    pub(crate) fn anonymous(len: usize) -> io::Result<Self> {
        let map = MmapOptions::new().len(len).map_anon()?;
        Ok(Self {
            map: MmapRaw::from(map),
            len,
            guard: RwLock::new(()),
        })
    }

    /// Shared writable mapping of `file[offset, offset + len)`.
    pub(crate) fn file(file: &File, offset: u64, len: usize) -> io::Result<Self> {
        let map = MmapOptions::new().offset(offset).len(len).map_raw(file)?;
        Ok(Self {
            map,
            len,
            guard: RwLock::new(()),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn with_slice<R>(&self, offset: usize, len: usize, f: impl FnOnce(&[u8]) -> R) -> R {
        assert!(offset + len <= self.len, "region read out of bounds");
        let _g = self.guard.read().unwrap_or_else(|e| e.into_inner());
        // SAFETY: bounds checked above, shared guard held.
        let s = unsafe { std::slice::from_raw_parts(self.map.as_ptr().add(offset), len) };
        f(s)
    }

    pub(crate) fn with_slice_mut<R>(
        &self,
        offset: usize,
        len: usize,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> R {
        assert!(offset + len <= self.len, "region write out of bounds");
        let _g = self.guard.write().unwrap_or_else(|e| e.into_inner());
        // SAFETY: bounds checked above, exclusive guard held.
        let s = unsafe { std::slice::from_raw_parts_mut(self.map.as_mut_ptr().add(offset), len) };
        f(s)
    }

    pub(crate) fn read(&self, offset: usize, out: &mut [u8]) {
        self.with_slice(offset, out.len(), |s| out.copy_from_slice(s));
    }

    pub(crate) fn write(&self, offset: usize, data: &[u8]) {
        self.with_slice_mut(offset, data.len(), |s| s.copy_from_slice(data));
    }

    /// Synchronous write-back of a byte range (msync with MS_SYNC).
    pub(crate) fn flush(&self, offset: usize, len: usize) -> io::Result<()> {
        if len == 0 {
            return Ok(());
        }
        self.map.flush_range(offset, len)
    }
}
