//! STREAM arrays held in three windows of the same kind and size.

use std::path::Path;

use crate::bench::kernels::{Kernel, A, B, C, INIT_A, INIT_B, INIT_C};
use crate::bench::BenchError;
use crate::hints::{AllocationKind, HintSet};
use crate::runtime::RankContext;
use crate::storage::{StorageError, SyncMode};
use crate::window::{win_allocate, Segment, Window};

/// Elements handed to the kernel per call on storage-backed windows, so dirty
/// accounting keeps pace with the writes.
pub const PASS_CHUNK_ELEMENTS: usize = 1 << 17;

const ELEM: usize = std::mem::size_of::<f64>();

/// Backing chosen for the three arrays of one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayBacking {
    Memory,
    Storage,
    /// Half of every array in memory, the rest on storage.
    Hybrid,
}

pub struct WindowArrays {
    windows: Vec<Window>,
    len: usize,
}

pub fn array_file(dir: &Path, array: usize) -> std::path::PathBuf {
    dir.join(format!("stream_{}.dat", ["a", "b", "c"][array]))
}

impl WindowArrays {
    /// Collective: allocates `len` elements per array on this rank.
    pub fn allocate(
        ctx: &RankContext,
        len: usize,
        backing: ArrayBacking,
        dir: &Path,
        sync_mode: SyncMode,
    ) -> Result<Self, BenchError> {
        let size = (len * ELEM) as u64;
        let mut windows = Vec::with_capacity(3);
        for array in [A, B, C] {
            let hints = match backing {
                ArrayBacking::Memory => HintSet::memory(),
                ArrayBacking::Storage => HintSet::storage(array_file(dir, array)),
                ArrayBacking::Hybrid if len >= 2 => HintSet::hybrid(array_file(dir, array), (len / 2 * ELEM) as u64),
                ArrayBacking::Hybrid => HintSet::storage(array_file(dir, array)),
            }
            .with(crate::hints::SYNC_MODE, sync_mode.as_str());
            windows.push(win_allocate(size, ELEM as u64, &hints, ctx)?);
        }
        Ok(Self { windows, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self, array: usize) -> &Window {
        &self.windows[array]
    }

    /// Sets a=1, b=2, c=0 and writes everything back.
    pub fn initialize(&self) -> Result<(), BenchError> {
        for (array, value) in [(A, INIT_A), (B, INIT_B), (C, INIT_C)] {
            let w = &self.windows[array];
            let chunk = vec![value; PASS_CHUNK_ELEMENTS];
            let mut at = 0;
            while at < self.len {
                let n = PASS_CHUNK_ELEMENTS.min(self.len - at);
                w.local_write((at * ELEM) as u64, bytemuck::cast_slice(&chunk[..n]))?;
                at += n;
            }
            w.local_sync(true)?;
        }
        Ok(())
    }

    /// Runs `kernel` over elements `[lo, hi)`.
    pub fn apply(&self, kernel: Kernel, scalar: f64, lo: usize, hi: usize) -> Result<(), BenchError> {
        // nothing to account for in memory, and one long pass lets large
        // copies use streaming stores
        if matches!(self.windows[A].kind(), AllocationKind::Memory) {
            return Ok(self.apply_span(kernel, scalar, lo, hi)?);
        }
        let mut at = lo;
        while at < hi {
            let end = hi.min(at + PASS_CHUNK_ELEMENTS);
            self.apply_span(kernel, scalar, at, end)?;
            at = end;
        }
        Ok(())
    }

    fn apply_span(&self, kernel: Kernel, scalar: f64, lo: usize, hi: usize) -> Result<(), StorageError> {
        let out = self.windows[kernel.output()].local().backing();
        let ins: Vec<_> = kernel.inputs().iter().map(|&i| self.windows[i].local().backing()).collect();
        let (off, len) = (lo * ELEM, (hi - lo) * ELEM);
        for p in out.pieces(off, len) {
            let start = off + p.range_offset;
            // all three arrays share one layout, so each input maps to one piece
            let in_pieces: Vec<_> = ins
                .iter()
                .map(|b| {
                    let mut v = b.pieces(start, p.len);
                    debug_assert_eq!(v.len(), 1);
                    v.remove(0)
                })
                .collect();
            let run = |srcs: &[&[u8]]| {
                p.segment.modify(p.seg_offset, p.len, |dst| {
                    let srcs: Vec<&[f64]> = srcs.iter().map(|s| bytemuck::cast_slice::<u8, f64>(s)).collect();
                    kernel.apply(scalar, &srcs, bytemuck::cast_slice_mut(dst));
                })
            };
            let seg = |i: usize| (in_pieces[i].segment, in_pieces[i].seg_offset);
            match in_pieces.len() {
                1 => {
                    let (s0, o0) = seg(0);
                    s0.with_slice(o0, p.len, |x| run(&[x]))??;
                }
                _ => {
                    let ((s0, o0), (s1, o1)) = (seg(0), seg(1));
                    with2(s0, o0, s1, o1, p.len, |x, y| run(&[x, y]))??;
                }
            }
        }
        Ok(())
    }

    /// Flushes the output array's elements `[lo, hi)`.
    pub fn sync_output(&self, kernel: Kernel, lo: usize, hi: usize, wait: bool) -> Result<(), BenchError> {
        self.windows[kernel.output()].local_sync_range((lo * ELEM) as u64, ((hi - lo) * ELEM) as u64, wait)?;
        Ok(())
    }

    pub fn read_element(&self, array: usize, index: usize) -> Result<f64, BenchError> {
        let bytes = self.windows[array].local_read((index * ELEM) as u64, ELEM)?;
        Ok(f64::from_ne_bytes(bytes.try_into().expect("eight bytes")))
    }

    pub fn read_all(&self, array: usize) -> Result<Vec<f64>, BenchError> {
        let bytes = self.windows[array].local_read(0, self.len * ELEM)?;
        Ok(bytes
            .chunks_exact(ELEM)
            .map(|c| f64::from_ne_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    /// Writer stalls summed over the three arrays.
    pub fn stall_count(&self) -> u64 {
        self.windows.iter().map(|w| w.storage_stats().stall_count).sum()
    }

    /// Collective: frees all three windows, writing storage back first.
    pub fn free(mut self) -> Result<(), BenchError> {
        let mut first = None;
        for w in &mut self.windows {
            if let Err(e) = w.free() {
                first.get_or_insert(e);
            }
        }
        match first {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

fn with2<R>(
    s0: Segment<'_>,
    o0: usize,
    s1: Segment<'_>,
    o1: usize,
    len: usize,
    f: impl FnOnce(&[u8], &[u8]) -> R,
) -> Result<R, StorageError> {
    s0.with_slice(o0, len, |x| s1.with_slice(o1, len, |y| f(x, y)))?
}
