//! In-process rank runtime.
//!
//! Ranks are threads of one process. They share a [`World`] that provides the
//! collective rendezvous (barrier and all-gather), an ordered point-to-point
//! mailbox per (sender, receiver) pair, and the window registry. The harness
//! in [`spawn_ranks`] joins all ranks and turns hangs into a
//! [`HarnessError::TimeoutDiagnostic`] via a wall-clock watchdog.

use std::any::Any;
use std::cell::Cell;
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Display;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::storage::FlushPolicy;
use crate::window::WindowGroup;

/// Environment variable holding the default rank count.
pub const RANKS_ENV: &str = "STORWIN_RANKS";
/// Environment variable holding the watchdog timeout in milliseconds.
pub const WATCHDOG_ENV: &str = "STORWIN_WATCHDOG_MS";
pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(30);

// Blocking waits re-check the abort flag at this period.
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("rank {0} is outside the group")]
    UnknownRank(usize),
    #[error("the world was aborted while rank {0} was blocked")]
    Aborted(usize),
    #[error("collective mismatch: ranks entered different collectives")]
    CollectiveMismatch,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("watchdog fired after {after:?}; ranks still running: {running:?}")]
    TimeoutDiagnostic { running: Vec<usize>, after: Duration },
    #[error("rank {rank} failed: {cause}")]
    RankFailure { rank: usize, cause: String },
    #[error("rank count must be at least 1")]
    NoRanks,
}

/// Rank count from `STORWIN_RANKS`, else 1.
pub fn default_ranks() -> usize {
    std::env::var(RANKS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Watchdog from `STORWIN_WATCHDOG_MS`, else 30 s.
pub fn default_watchdog() -> Duration {
    std::env::var(WATCHDOG_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_WATCHDOG)
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub watchdog: Duration,
    /// Flush policy given to storage-backed windows allocated in this world.
    pub policy: FlushPolicy,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            watchdog: default_watchdog(),
            policy: FlushPolicy::default(),
        }
    }
}

impl WorldConfig {
    pub fn with_watchdog(mut self, watchdog: Duration) -> Self {
        self.watchdog = watchdog;
        self
    }

    pub fn with_policy(mut self, policy: FlushPolicy) -> Self {
        self.policy = policy;
        self
    }
}

type Slot = Box<dyn Any + Send + Sync>;

struct CollectiveState {
    generation: u64,
    arrived: usize,
    slots: Vec<Option<Slot>>,
    last: Option<Arc<Vec<Slot>>>,
}

struct Mailbox {
    queue: Mutex<VecDeque<Vec<u8>>>,
    ready: Condvar,
}

/// Window id → the per-rank members of that window.
#[derive(Default)]
pub struct WindowRegistry {
    map: RwLock<BTreeMap<u64, Arc<WindowGroup>>>,
}

impl WindowRegistry {
    pub(crate) fn insert(&self, id: u64, group: Arc<WindowGroup>) {
        self.map.write().unwrap_or_else(|e| e.into_inner()).insert(id, group);
    }

    pub(crate) fn remove(&self, id: u64) -> Option<Arc<WindowGroup>> {
        self.map.write().unwrap_or_else(|e| e.into_inner()).remove(&id)
    }

    pub fn get(&self, id: u64) -> Option<Arc<WindowGroup>> {
        self.map.read().unwrap_or_else(|e| e.into_inner()).get(&id).cloned()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.map.read().unwrap_or_else(|e| e.into_inner()).keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().unwrap_or_else(|e| e.into_inner()).is_empty()
    }
}

pub struct World {
    size: usize,
    config: WorldConfig,
    aborted: AtomicBool,
    collective: Mutex<CollectiveState>,
    collective_cv: Condvar,
    // index: receiver * size + sender
    mailboxes: Vec<Mailbox>,
    registry: WindowRegistry,
}

impl World {
    fn new(size: usize, config: WorldConfig) -> Self {
        Self {
            size,
            config,
            aborted: AtomicBool::new(false),
            collective: Mutex::new(CollectiveState {
                generation: 0,
                arrived: 0,
                slots: (0..size).map(|_| None).collect(),
                last: None,
            }),
            collective_cv: Condvar::new(),
            mailboxes: (0..size * size)
                .map(|_| Mailbox {
                    queue: Mutex::new(VecDeque::new()),
                    ready: Condvar::new(),
                })
                .collect(),
            registry: WindowRegistry::default(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn registry(&self) -> &WindowRegistry {
        &self.registry
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::Acquire)
    }

    fn abort(&self) {
        self.aborted.store(true, Ordering::Release);
        self.collective_cv.notify_all();
        for m in &self.mailboxes {
            m.ready.notify_all();
        }
    }

    pub(crate) fn all_gather<T>(&self, rank: usize, value: T) -> Result<Vec<T>, RuntimeError>
    where
        T: Clone + Send + Sync + 'static,
    {
        let mut st = self.collective.lock().unwrap_or_else(|e| e.into_inner());
        let generation = st.generation;
        st.slots[rank] = Some(Box::new(value));
        st.arrived += 1;
        if st.arrived == self.size {
            let vals: Vec<Slot> = st.slots.iter_mut().map(|s| s.take().expect("slot filled")).collect();
            st.last = Some(Arc::new(vals));
            st.arrived = 0;
            st.generation += 1;
            self.collective_cv.notify_all();
        } else {
            st = self.wait_until(rank, st, &self.collective_cv, |s| s.generation != generation)?;
        }
        let all = st.last.clone().expect("collective result published");
        drop(st);
        all.iter()
            .map(|v| v.downcast_ref::<T>().cloned().ok_or(RuntimeError::CollectiveMismatch))
            .collect()
    }

    pub(crate) fn barrier(&self, rank: usize) -> Result<(), RuntimeError> {
        self.all_gather(rank, ()).map(|_| ())
    }

    /// Waits on `cv` until `done` holds, polling the abort flag.
    pub(crate) fn wait_until<'a, T>(
        &self,
        rank: usize,
        mut guard: MutexGuard<'a, T>,
        cv: &Condvar,
        mut done: impl FnMut(&mut T) -> bool,
    ) -> Result<MutexGuard<'a, T>, RuntimeError> {
        while !done(&mut guard) {
            if self.is_aborted() {
                return Err(RuntimeError::Aborted(rank));
            }
            guard = cv.wait_timeout(guard, POLL).unwrap_or_else(|e| e.into_inner()).0;
        }
        Ok(guard)
    }
}

/// One rank's handle on the world. Owned by exactly one thread.
pub struct RankContext {
    rank: usize,
    world: Arc<World>,
    alloc_seq: Cell<u64>,
}

impl RankContext {
    fn new(rank: usize, world: Arc<World>) -> Self {
        Self {
            rank,
            world,
            alloc_seq: Cell::new(0),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.world.size
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn config(&self) -> &WorldConfig {
        &self.world.config
    }

    // Collective allocations happen in the same order on every rank, so a
    // per-rank counter yields the same id everywhere.
    pub(crate) fn next_window_id(&self) -> u64 {
        let id = self.alloc_seq.get();
        self.alloc_seq.set(id + 1);
        id
    }

    /// Every rank contributes one value; every rank receives all of them in
    /// rank order.
    pub fn all_gather<T>(&self, value: T) -> Result<Vec<T>, RuntimeError>
    where
        T: Clone + Send + Sync + 'static,
    {
        self.world.all_gather(self.rank, value)
    }

    /// No rank returns before every rank has entered.
    pub fn barrier(&self) -> Result<(), RuntimeError> {
        self.world.barrier(self.rank)
    }

    /// Reliable, ordered delivery to `to`.
    pub fn send(&self, to: usize, msg: Vec<u8>) -> Result<(), RuntimeError> {
        if to >= self.size() {
            return Err(RuntimeError::UnknownRank(to));
        }
        let mb = &self.world.mailboxes[to * self.size() + self.rank];
        mb.queue.lock().unwrap_or_else(|e| e.into_inner()).push_back(msg);
        mb.ready.notify_one();
        Ok(())
    }

    /// Next message from `from`, blocking.
    pub fn recv(&self, from: usize) -> Result<Vec<u8>, RuntimeError> {
        if from >= self.size() {
            return Err(RuntimeError::UnknownRank(from));
        }
        let mb = &self.world.mailboxes[self.rank * self.size() + from];
        let q = mb.queue.lock().unwrap_or_else(|e| e.into_inner());
        let mut q = self.world.wait_until(self.rank, q, &mb.ready, |q| !q.is_empty())?;
        Ok(q.pop_front().expect("non-empty queue"))
    }
}

/// Per-rank results in rank order, plus any windows never freed.
#[derive(Debug)]
pub struct HarnessOutput<T> {
    pub results: Vec<T>,
    pub leaked_windows: Vec<u64>,
}

fn panic_message(p: &(dyn Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_owned()
    }
}

/// Runs `entry` on `ranks` concurrent rank contexts and joins them.
///
/// The first failing rank aborts the world so blocked peers unwind; if the
/// watchdog expires first the ranks still running are reported.
pub fn spawn_ranks<T, E, F>(ranks: usize, config: WorldConfig, entry: F) -> Result<HarnessOutput<T>, HarnessError>
where
    T: Send,
    E: Display,
    F: Fn(RankContext) -> Result<T, E> + Sync,
{
    if ranks == 0 {
        return Err(HarnessError::NoRanks);
    }
    let watchdog = config.watchdog;
    let world = Arc::new(World::new(ranks, config));
    let started = Instant::now();
    let (tx, rx) = mpsc::channel::<(usize, Result<T, String>)>();

    let mut results: Vec<Option<T>> = (0..ranks).map(|_| None).collect();
    let mut failure: Option<(usize, String)> = None;
    let mut timeout: Option<Vec<usize>> = None;

    thread::scope(|s| {
        for r in 0..ranks {
            let tx = tx.clone();
            let ctx = RankContext::new(r, Arc::clone(&world));
            let entry = &entry;
            thread::Builder::new()
                .name(format!("rank-{r}"))
                .spawn_scoped(s, move || {
                    let out = match panic::catch_unwind(AssertUnwindSafe(|| entry(ctx))) {
                        Ok(Ok(v)) => Ok(v),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(p) => Err(format!("panicked: {}", panic_message(&*p))),
                    };
                    let _ = tx.send((r, out));
                })
                .expect("spawn rank thread");
        }
        drop(tx);

        let deadline = started + watchdog;
        let mut done = vec![false; ranks];
        let mut remaining = ranks;
        while remaining > 0 {
            let wait = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok((r, out)) => {
                    done[r] = true;
                    remaining -= 1;
                    match out {
                        Ok(v) => results[r] = Some(v),
                        Err(cause) => {
                            if failure.is_none() && timeout.is_none() {
                                failure = Some((r, cause));
                                world.abort();
                            }
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    if timeout.is_none() && failure.is_none() {
                        timeout = Some((0..ranks).filter(|&r| !done[r]).collect());
                        world.abort();
                    }
                    // keep draining; aborted ranks unwind on their own
                    while let Ok((r, out)) = rx.recv() {
                        done[r] = true;
                        if let Ok(v) = out {
                            results[r] = Some(v);
                        }
                    }
                    remaining = 0;
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
    });

    if let Some(running) = timeout {
        return Err(HarnessError::TimeoutDiagnostic {
            running,
            after: watchdog,
        });
    }
    if let Some((rank, cause)) = failure {
        return Err(HarnessError::RankFailure { rank, cause });
    }
    let leaked_windows = world.registry.ids();
    Ok(HarnessOutput {
        results: results.into_iter().map(|r| r.expect("every rank reported")).collect(),
        leaked_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default().with_watchdog(Duration::from_secs(10))
    }

    #[test]
    fn single_rank_returns_value() {
        let out = spawn_ranks(1, cfg(), |_ctx| Ok::<_, String>(42)).unwrap();
        assert_eq!(out.results, vec![42]);
        assert!(out.leaked_windows.is_empty());
    }

    #[test]
    fn zero_ranks_rejected() {
        assert!(matches!(
            spawn_ranks(0, cfg(), |_ctx| Ok::<_, String>(())),
            Err(HarnessError::NoRanks)
        ));
    }

    #[test]
    fn all_gather_is_rank_ordered() {
        let out = spawn_ranks(3, cfg(), |ctx| ctx.all_gather(ctx.rank() * 10)).unwrap();
        for r in out.results {
            assert_eq!(r, vec![0, 10, 20]);
        }
    }

    #[test]
    fn barrier_single_and_many() {
        spawn_ranks(1, cfg(), |ctx| ctx.barrier()).unwrap();
        spawn_ranks(3, cfg(), |ctx| {
            for _ in 0..50 {
                ctx.barrier()?;
            }
            Ok::<_, RuntimeError>(())
        })
        .unwrap();
    }

    #[test]
    fn barrier_waits_for_late_rank() {
        let start = Instant::now();
        let out = spawn_ranks(3, cfg(), |ctx| {
            if ctx.rank() == 0 {
                thread::sleep(Duration::from_millis(50));
            }
            ctx.barrier()?;
            Ok::<_, RuntimeError>(start.elapsed())
        })
        .unwrap();
        for t in out.results {
            assert!(t >= Duration::from_millis(50), "returned after {t:?}");
        }
    }

    #[test]
    fn mismatched_collective_times_out() {
        let c = cfg().with_watchdog(Duration::from_millis(300));
        let err = spawn_ranks(2, c, |ctx| {
            if ctx.rank() == 0 {
                ctx.barrier()?;
            }
            Ok::<_, RuntimeError>(())
        })
        .unwrap_err();
        match err {
            HarnessError::TimeoutDiagnostic { running, .. } => assert_eq!(running, vec![0]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn failing_rank_unblocks_peers() {
        let err = spawn_ranks(3, cfg(), |ctx| {
            if ctx.rank() == 1 {
                return Err("boom".to_string());
            }
            ctx.barrier().map_err(|e| e.to_string())
        })
        .unwrap_err();
        match err {
            HarnessError::RankFailure { rank, cause } => {
                assert_eq!(rank, 1);
                assert_eq!(cause, "boom");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn panic_is_reported() {
        let err = spawn_ranks(2, cfg(), |ctx| {
            if ctx.rank() == 0 {
                panic!("kaput");
            }
            Ok::<_, String>(())
        })
        .unwrap_err();
        assert!(matches!(err, HarnessError::RankFailure { rank: 0, ref cause } if cause.contains("kaput")));
    }

    #[test]
    fn transport_is_ordered_per_pair() {
        const N: u32 = 500;
        let out = spawn_ranks(3, cfg(), |ctx| {
            let me = ctx.rank();
            let peers: Vec<usize> = (0..ctx.size()).filter(|&p| p != me).collect();
            for seq in 0..N {
                for &p in &peers {
                    ctx.send(p, seq.to_le_bytes().to_vec())?;
                }
            }
            for &p in &peers {
                for seq in 0..N {
                    let m = ctx.recv(p)?;
                    if m != seq.to_le_bytes() {
                        return Ok(false);
                    }
                }
            }
            Ok::<_, RuntimeError>(true)
        })
        .unwrap();
        assert!(out.results.iter().all(|&ok| ok));
    }

    #[test]
    fn send_to_unknown_rank() {
        spawn_ranks(2, cfg(), |ctx| {
            assert_eq!(ctx.send(2, vec![]), Err(RuntimeError::UnknownRank(2)));
            assert_eq!(ctx.recv(5), Err(RuntimeError::UnknownRank(5)));
            Ok::<_, String>(())
        })
        .unwrap();
    }
}
