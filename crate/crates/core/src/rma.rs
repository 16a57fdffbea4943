//! One-sided put/get/accumulate.
//!
//! Requests are applied to the target member as soon as they are issued, so
//! the completion guarantees of the epoch-closing calls (`fence`, `flush`,
//! `unlock`) hold trivially; what those calls add is the synchronization that
//! makes the bytes visible to the target's subsequent reads. Storage-backed
//! targets receive the bytes through their mapping, which means RMA traffic is
//! subject to the target's flush policy like any local store.
//!
//! Overlapping puts to the same bytes within one epoch are undefined.

use thiserror::Error;

use crate::runtime::RuntimeError;
use crate::storage::StorageError;
use crate::window::{Window, WindowMember};

#[derive(Debug, Error)]
pub enum RmaError {
    #[error("no access epoch is open for target rank {0}")]
    NoEpoch(usize),
    #[error("access of {len} bytes at byte {offset} exceeds target window of {size} bytes")]
    RangeError { offset: u64, len: u64, size: u64 },
    #[error("rank {0} is not part of the window group")]
    UnknownRank(usize),
    #[error("accumulate element size must be 4 or 8, got {0}")]
    BadElemSize(usize),
    #[error("origin buffer holds {actual} bytes, request needs {expected}")]
    OriginSize { expected: usize, actual: usize },
    #[error("lock on rank {0} already held")]
    LockHeld(usize),
    #[error("no lock held on rank {0}")]
    NotLocked(usize),
    #[error("cannot mix fence and lock epochs: {0}")]
    EpochConflict(&'static str),
    #[error("window already freed")]
    Freed,
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combiner {
    /// Element-wise wrapping two's-complement addition.
    Sum,
    /// Element-wise overwrite.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RmaOp {
    Put,
    Get,
    Accumulate(Combiner),
}

/// One contiguous one-sided request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RmaRequest {
    pub op: RmaOp,
    pub target_rank: usize,
    /// In units of the target's displacement unit.
    pub target_disp: u64,
    pub elem_size: usize,
    pub count: usize,
}

impl RmaRequest {
    pub fn put(target_rank: usize, target_disp: u64, len: usize) -> Self {
        Self {
            op: RmaOp::Put,
            target_rank,
            target_disp,
            elem_size: 1,
            count: len,
        }
    }

    pub fn get(target_rank: usize, target_disp: u64, len: usize) -> Self {
        Self {
            op: RmaOp::Get,
            ..Self::put(target_rank, target_disp, len)
        }
    }

    pub fn accumulate(combiner: Combiner, target_rank: usize, target_disp: u64, elem_size: usize, count: usize) -> Self {
        Self {
            op: RmaOp::Accumulate(combiner),
            target_rank,
            target_disp,
            elem_size,
            count,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.elem_size * self.count
    }
}

/// `target ⊕= origin`, element-wise, native byte order.
pub fn combine(combiner: Combiner, elem_size: usize, target: &mut [u8], origin: &[u8]) {
    debug_assert_eq!(target.len(), origin.len());
    match combiner {
        Combiner::Replace => target.copy_from_slice(origin),
        Combiner::Sum => match elem_size {
            4 => {
                for (t, o) in target.chunks_exact_mut(4).zip(origin.chunks_exact(4)) {
                    let a = i32::from_ne_bytes(t.try_into().expect("4 bytes"));
                    let b = i32::from_ne_bytes(o.try_into().expect("4 bytes"));
                    t.copy_from_slice(&a.wrapping_add(b).to_ne_bytes());
                }
            }
            8 => {
                for (t, o) in target.chunks_exact_mut(8).zip(origin.chunks_exact(8)) {
                    let a = i64::from_ne_bytes(t.try_into().expect("8 bytes"));
                    let b = i64::from_ne_bytes(o.try_into().expect("8 bytes"));
                    t.copy_from_slice(&a.wrapping_add(b).to_ne_bytes());
                }
            }
            _ => unreachable!("element size validated by caller"),
        },
    }
}

impl Window {
    fn epoch_allows(&self, target: usize) -> Result<(), RmaError> {
        if self.freed {
            return Err(RmaError::Freed);
        }
        let ep = self.epoch.lock().unwrap_or_else(|e| e.into_inner());
        if ep.fence || ep.locks.contains_key(&target) {
            Ok(())
        } else {
            Err(RmaError::NoEpoch(target))
        }
    }

    fn resolve(&self, req: &RmaRequest, origin_len: usize) -> Result<(&WindowMember, usize), RmaError> {
        let target = self.target(req.target_rank).ok_or(RmaError::UnknownRank(req.target_rank))?;
        self.epoch_allows(req.target_rank)?;
        if let RmaOp::Accumulate(_) = req.op {
            if req.elem_size != 4 && req.elem_size != 8 {
                return Err(RmaError::BadElemSize(req.elem_size));
            }
        }
        let len = req.byte_len();
        if origin_len != len {
            return Err(RmaError::OriginSize {
                expected: len,
                actual: origin_len,
            });
        }
        let offset = req.target_disp.checked_mul(target.disp_unit);
        match offset.and_then(|o| o.checked_add(len as u64)) {
            Some(end) if end <= target.size => Ok((target, offset.expect("checked") as usize)),
            _ if len == 0 => Ok((target, 0)),
            _ => Err(RmaError::RangeError {
                offset: offset.unwrap_or(u64::MAX),
                len: len as u64,
                size: target.size,
            }),
        }
    }

    /// Writes `origin` into the target window at `target_disp`.
    pub fn put(&self, origin: &[u8], target_rank: usize, target_disp: u64) -> Result<(), RmaError> {
        let req = RmaRequest::put(target_rank, target_disp, origin.len());
        self.put_request(&req, origin)
    }

    pub fn put_request(&self, req: &RmaRequest, origin: &[u8]) -> Result<(), RmaError> {
        let (target, offset) = self.resolve(req, origin.len())?;
        if !origin.is_empty() {
            target.write(offset, origin)?;
        }
        Ok(())
    }

    /// Reads `origin.len()` bytes of the target window into `origin`.
    pub fn get(&self, origin: &mut [u8], target_rank: usize, target_disp: u64) -> Result<(), RmaError> {
        let req = RmaRequest::get(target_rank, target_disp, origin.len());
        self.get_request(&req, origin)
    }

    pub fn get_request(&self, req: &RmaRequest, origin: &mut [u8]) -> Result<(), RmaError> {
        let (target, offset) = self.resolve(req, origin.len())?;
        if !origin.is_empty() {
            target.read(offset, origin)?;
        }
        Ok(())
    }

    /// Element-wise `target ⊕= origin` with `elem_size`-byte integers.
    pub fn accumulate(
        &self,
        origin: &[u8],
        elem_size: usize,
        combiner: Combiner,
        target_rank: usize,
        target_disp: u64,
    ) -> Result<(), RmaError> {
        let count = origin.len().checked_div(elem_size).unwrap_or(0);
        let req = RmaRequest::accumulate(combiner, target_rank, target_disp, elem_size, count);
        self.accumulate_request(&req, origin)
    }

    pub fn accumulate_request(&self, req: &RmaRequest, origin: &[u8]) -> Result<(), RmaError> {
        let RmaOp::Accumulate(combiner) = req.op else {
            return Err(RmaError::EpochConflict("accumulate_request needs an accumulate op"));
        };
        let (target, offset) = self.resolve(req, origin.len())?;
        if origin.is_empty() {
            return Ok(());
        }
        let _serial = target.accumulate.lock().unwrap_or_else(|e| e.into_inner());
        let mut cur = vec![0; origin.len()];
        target.read(offset, &mut cur)?;
        combine(combiner, req.elem_size, &mut cur, origin);
        target.write(offset, &cur)?;
        Ok(())
    }

    /// Dispatches any request. `buf` is the origin for put/accumulate and
    /// the destination for get.
    pub fn submit(&self, req: &RmaRequest, buf: &mut [u8]) -> Result<(), RmaError> {
        match req.op {
            RmaOp::Put => self.put_request(req, buf),
            RmaOp::Get => self.get_request(req, buf),
            RmaOp::Accumulate(_) => self.accumulate_request(req, buf),
        }
    }

    /// Collective. Completes every request issued before it on every rank and
    /// opens the next fence epoch.
    pub fn fence(&self) -> Result<(), RmaError> {
        self.fence_inner(true)
    }

    /// Collective. Like [`Window::fence`] but leaves no epoch open, which is
    /// required before [`Window::free`].
    pub fn fence_close(&self) -> Result<(), RmaError> {
        self.fence_inner(false)
    }

    fn fence_inner(&self, reopen: bool) -> Result<(), RmaError> {
        if self.freed {
            return Err(RmaError::Freed);
        }
        if !self.epoch.lock().unwrap_or_else(|e| e.into_inner()).locks.is_empty() {
            return Err(RmaError::EpochConflict("fence while holding passive-target locks"));
        }
        self.world.barrier(self.rank)?;
        self.epoch.lock().unwrap_or_else(|e| e.into_inner()).fence = reopen;
        Ok(())
    }

    /// Whether a fence epoch is currently open on this handle.
    pub fn in_fence_epoch(&self) -> bool {
        self.epoch.lock().unwrap_or_else(|e| e.into_inner()).fence
    }

    /// Starts a passive-target epoch on `target_rank`. Exclusive locks wait
    /// for every other holder; shared locks only for an exclusive holder.
    pub fn lock(&self, target_rank: usize, exclusive: bool) -> Result<(), RmaError> {
        if self.freed {
            return Err(RmaError::Freed);
        }
        let target = self.target(target_rank).ok_or(RmaError::UnknownRank(target_rank))?;
        {
            let ep = self.epoch.lock().unwrap_or_else(|e| e.into_inner());
            if ep.locks.contains_key(&target_rank) {
                return Err(RmaError::LockHeld(target_rank));
            }
            if ep.fence {
                return Err(RmaError::EpochConflict("lock inside a fence epoch"));
            }
        }
        let st = target.passive.lock().unwrap_or_else(|e| e.into_inner());
        let mut st = self.world.wait_until(self.rank, st, &target.passive_cv, |s| {
            s.exclusive.is_none() && (!exclusive || s.shared == 0)
        })?;
        if exclusive {
            st.exclusive = Some(self.rank);
        } else {
            st.shared += 1;
        }
        drop(st);
        self.epoch
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .locks
            .insert(target_rank, exclusive);
        Ok(())
    }

    /// Completes all requests issued to `target_rank` so far.
    pub fn flush(&self, target_rank: usize) -> Result<(), RmaError> {
        if self.freed {
            return Err(RmaError::Freed);
        }
        if !self
            .epoch
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .locks
            .contains_key(&target_rank)
        {
            return Err(RmaError::NotLocked(target_rank));
        }
        // requests complete at issue; the fence orders them for other threads
        std::sync::atomic::fence(std::sync::atomic::Ordering::SeqCst);
        Ok(())
    }

    /// Flush plus lock release.
    pub fn unlock(&self, target_rank: usize) -> Result<(), RmaError> {
        self.flush(target_rank)?;
        let target = self.target(target_rank).ok_or(RmaError::UnknownRank(target_rank))?;
        let exclusive = self
            .epoch
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .locks
            .remove(&target_rank)
            .expect("lock checked by flush");
        let mut st = target.passive.lock().unwrap_or_else(|e| e.into_inner());
        if exclusive {
            st.exclusive = None;
        } else {
            st.shared -= 1;
        }
        target.passive_cv.notify_all();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_wraps_per_element() {
        let mut t: Vec<u8> = [i64::MAX, 2, 3].iter().flat_map(|v| v.to_ne_bytes()).collect();
        let o: Vec<u8> = [1i64, 20, 30].iter().flat_map(|v| v.to_ne_bytes()).collect();
        combine(Combiner::Sum, 8, &mut t, &o);
        let got: Vec<i64> = t.chunks(8).map(|c| i64::from_ne_bytes(c.try_into().unwrap())).collect();
        assert_eq!(got, [i64::MIN, 22, 33]);
    }

    #[test]
    fn sum_four_byte_elements() {
        let mut t: Vec<u8> = [-1i32, 5].iter().flat_map(|v| v.to_ne_bytes()).collect();
        let o: Vec<u8> = [1i32, -10].iter().flat_map(|v| v.to_ne_bytes()).collect();
        combine(Combiner::Sum, 4, &mut t, &o);
        let got: Vec<i32> = t.chunks(4).map(|c| i32::from_ne_bytes(c.try_into().unwrap())).collect();
        assert_eq!(got, [0, -5]);
    }

    #[test]
    fn replace_overwrites() {
        let mut t = 3i64.to_ne_bytes().to_vec();
        combine(Combiner::Replace, 8, &mut t, &7i64.to_ne_bytes());
        assert_eq!(t, 7i64.to_ne_bytes());
    }
}
