//! Seeded random RMA programs, a single-threaded oracle for them, and a
//! runner that executes them on real ranks.
//!
//! Within one epoch the generator only emits operations whose outcome does
//! not depend on their order: no put overlaps any other access, gets never
//! overlap writes, and overlapping accumulates must be Sum over the same
//! element size and alignment. The oracle still checks this by applying
//! every epoch forwards and backwards.

use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storwin::rma::combine;
use storwin::{
    spawn_ranks, win_allocate, Combiner, FlushPolicy, HarnessError, HintSet, RankContext, RmaError, WindowError,
    WorldConfig,
};

pub const MAX_RANKS: usize = 4;
pub const MAX_WINDOW_BYTES: u64 = 4096;
pub const MAX_OPS: usize = 64;
const MAX_TRANSFER: u64 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    Memory,
    Storage,
    Hybrid,
}

impl Backing {
    pub const ALL: [Backing; 3] = [Backing::Memory, Backing::Storage, Backing::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Backing::Memory => "memory",
            Backing::Storage => "storage",
            Backing::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Put(Vec<u8>),
    Get(usize),
    Accumulate {
        combiner: Combiner,
        elem_size: usize,
        data: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramOp {
    pub origin: usize,
    pub target: usize,
    pub disp: u64,
    pub kind: OpKind,
}

impl ProgramOp {
    fn byte_range(&self, disp_unit: u64) -> (u64, u64) {
        let lo = self.disp * disp_unit;
        let len = match &self.kind {
            OpKind::Put(d) => d.len(),
            OpKind::Get(n) => *n,
            OpKind::Accumulate { data, .. } => data.len(),
        } as u64;
        (lo, lo + len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sync {
    Fence,
    /// Every origin takes a shared lock on each target it touches.
    Lock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Epoch {
    pub sync: Sync,
    pub ops: Vec<ProgramOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowShape {
    pub size: u64,
    pub disp_unit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub seed: u64,
    pub windows: Vec<WindowShape>,
    pub epochs: Vec<Epoch>,
}

/// Final window bytes per rank and the bytes every get returned, in
/// program order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub windows: Vec<Vec<u8>>,
    pub gets: Vec<Vec<u8>>,
}

fn conflicts(a: &ProgramOp, b: &ProgramOp, disp_unit: u64) -> bool {
    if a.target != b.target {
        return false;
    }
    let (alo, ahi) = a.byte_range(disp_unit);
    let (blo, bhi) = b.byte_range(disp_unit);
    if alo >= bhi || blo >= ahi {
        return false;
    }
    match (&a.kind, &b.kind) {
        (OpKind::Get(_), OpKind::Get(_)) => false,
        (
            OpKind::Accumulate {
                combiner: Combiner::Sum,
                elem_size: ea,
                ..
            },
            OpKind::Accumulate {
                combiner: Combiner::Sum,
                elem_size: eb,
                ..
            },
        ) => ea != eb || alo % *ea as u64 != blo % *eb as u64,
        _ => true,
    }
}

impl Program {
    pub fn ranks(&self) -> usize {
        self.windows.len()
    }

    pub fn op_count(&self) -> usize {
        self.epochs.iter().map(|e| e.ops.len()).sum()
    }

    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks = rng.random_range(1..=MAX_RANKS);
        let windows: Vec<WindowShape> = (0..ranks)
            .map(|_| {
                let disp_unit = [1u64, 4, 8][rng.random_range(0..3)];
                let units = if rng.random_bool(0.1) {
                    0
                } else {
                    rng.random_range(1..=MAX_WINDOW_BYTES / disp_unit)
                };
                WindowShape {
                    size: units * disp_unit,
                    disp_unit,
                }
            })
            .collect();
        let total_ops = rng.random_range(1..=MAX_OPS);
        let n_epochs = rng.random_range(1..=8.min(total_ops));
        let mut epochs: Vec<Epoch> = (0..n_epochs)
            .map(|_| Epoch {
                sync: if rng.random_bool(0.3) { Sync::Lock } else { Sync::Fence },
                ops: Vec::new(),
            })
            .collect();

        for _ in 0..total_ops {
            let e = rng.random_range(0..n_epochs);
            for _attempt in 0..8 {
                let op = random_op(&mut rng, &windows);
                let du = windows[op.target].disp_unit;
                if epochs[e].ops.iter().all(|o| !conflicts(o, &op, du)) {
                    epochs[e].ops.push(op);
                    break;
                }
            }
        }
        Program { seed, windows, epochs }
    }

    fn apply(&self, state: &mut [Vec<u8>], op: &ProgramOp) -> Option<Vec<u8>> {
        let du = self.windows[op.target].disp_unit;
        let (lo, hi) = op.byte_range(du);
        let dst = &mut state[op.target][lo as usize..hi as usize];
        match &op.kind {
            OpKind::Put(d) => {
                dst.copy_from_slice(d);
                None
            }
            OpKind::Get(_) => Some(dst.to_vec()),
            OpKind::Accumulate {
                combiner,
                elem_size,
                data,
            } => {
                combine(*combiner, *elem_size, dst, data);
                None
            }
        }
    }

    /// Applies each epoch in program order, checking that the reverse order
    /// and a few seeded shuffles give the same bytes. Returns `Err` with a
    /// description if they do not.
    pub fn oracle(&self) -> Result<Outcome, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17));
        let mut state: Vec<Vec<u8>> = self.windows.iter().map(|w| vec![0; w.size as usize]).collect();
        let mut gets = Vec::new();
        for (i, epoch) in self.epochs.iter().enumerate() {
            let n = epoch.ops.len();
            let mut orders: Vec<Vec<usize>> = vec![(0..n).collect(), (0..n).rev().collect()];
            for _ in 0..2 {
                orders.push(rand::seq::index::sample(&mut rng, n, n).into_vec());
            }
            let mut results = orders.iter().map(|order| {
                let mut s = state.clone();
                let mut g: Vec<(usize, Vec<u8>)> = order
                    .iter()
                    .filter_map(|&k| self.apply(&mut s, &epoch.ops[k]).map(|b| (k, b)))
                    .collect();
                g.sort_by_key(|(k, _)| *k);
                (s, g)
            });
            let first = results.next().expect("at least one order");
            if results.any(|r| r != first) {
                return Err(format!("program {}: epoch {i} depends on operation order", self.seed));
            }
            state = first.0;
            gets.extend(first.1.into_iter().map(|(_, b)| b));
        }
        Ok(Outcome { windows: state, gets })
    }
}

fn random_op(rng: &mut ChaCha8Rng, windows: &[WindowShape]) -> ProgramOp {
    let origin = rng.random_range(0..windows.len());
    let target = rng.random_range(0..windows.len());
    let w = &windows[target];
    let units = w.size / w.disp_unit;
    let disp = if units == 0 { 0 } else { rng.random_range(0..units) };
    let room = w.size - disp * w.disp_unit;
    let kind = match rng.random_range(0..3) {
        0 => {
            let n = rng.random_range(0..=room.min(MAX_TRANSFER)) as usize;
            OpKind::Put((0..n).map(|_| rng.random()).collect())
        }
        1 => OpKind::Get(rng.random_range(0..=room.min(MAX_TRANSFER)) as usize),
        _ => {
            let elem_size = [4usize, 8][rng.random_range(0..2)];
            let max = (room.min(MAX_TRANSFER) / elem_size as u64) as usize;
            let count = rng.random_range(0..=max);
            let combiner = if rng.random_bool(0.75) { Combiner::Sum } else { Combiner::Replace };
            OpKind::Accumulate {
                combiner,
                elem_size,
                data: (0..count * elem_size).map(|_| rng.random()).collect(),
            }
        }
    };
    ProgramOp {
        origin,
        target,
        disp,
        kind,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Rma(#[from] RmaError),
    #[error(transparent)]
    Runtime(#[from] storwin::RuntimeError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("I/O on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("windows left registered after the run: {0:?}")]
    Leaked(Vec<u64>),
}

fn hints_for(backing: Backing, shape: &WindowShape, dir: &Path) -> HintSet {
    let path = dir.join("program.dat");
    match backing {
        _ if shape.size == 0 => HintSet::memory(),
        Backing::Memory => HintSet::memory(),
        Backing::Storage => HintSet::storage(path),
        Backing::Hybrid => HintSet::hybrid(path, shape.size / 2),
    }
}

/// Final window bytes and numbered get results of one rank.
type RankResult = (Vec<u8>, Vec<(usize, Vec<u8>)>);

fn rank_program(
    program: &Program,
    backing: Backing,
    dir: &Path,
    ctx: &RankContext,
) -> Result<RankResult, RunError> {
    let me = ctx.rank();
    let shape = &program.windows[me];
    let mut w = win_allocate(shape.size, shape.disp_unit, &hints_for(backing, shape, dir), ctx)?;
    let mut gets = Vec::new();
    let mut get_index = 0;
    let mut fence_open = false;
    for epoch in &program.epochs {
        match epoch.sync {
            Sync::Fence => {
                w.fence()?;
                fence_open = true;
            }
            Sync::Lock => {
                if fence_open {
                    w.fence_close()?;
                    fence_open = false;
                }
            }
        }
        let mut targets: Vec<usize> = epoch.ops.iter().filter(|o| o.origin == me).map(|o| o.target).collect();
        targets.sort_unstable();
        targets.dedup();
        if epoch.sync == Sync::Lock {
            for &t in &targets {
                w.lock(t, false)?;
            }
        }
        for op in &epoch.ops {
            let slot = get_index;
            if matches!(op.kind, OpKind::Get(_)) {
                get_index += 1;
            }
            if op.origin != me {
                continue;
            }
            match &op.kind {
                OpKind::Put(d) => w.put(d, op.target, op.disp)?,
                OpKind::Get(n) => {
                    let mut buf = vec![0; *n];
                    w.get(&mut buf, op.target, op.disp)?;
                    gets.push((slot, buf));
                }
                OpKind::Accumulate {
                    combiner,
                    elem_size,
                    data,
                } => {
                    let req = storwin::RmaRequest::accumulate(
                        *combiner,
                        op.target,
                        op.disp,
                        *elem_size,
                        data.len() / elem_size,
                    );
                    w.accumulate_request(&req, data)?;
                }
            }
        }
        if epoch.sync == Sync::Lock {
            for &t in &targets {
                w.unlock(t)?;
            }
            ctx.barrier()?;
        }
    }
    if fence_open {
        w.fence_close()?;
    }
    let bytes = w.local_read(0, shape.size as usize)?;
    w.free()?;
    Ok((bytes, gets))
}

/// Runs `program` on real ranks with windows of `backing` kind. Storage
/// files live in a fresh subdirectory of `dir`, removed afterwards.
pub fn run(program: &Program, backing: Backing, dir: &Path, policy: FlushPolicy) -> Result<Outcome, RunError> {
    let world = WorldConfig::default()
        .with_watchdog(Duration::from_secs(30))
        .with_policy(policy);
    let scratch = dir.join(format!("program-{}-{}", program.seed, backing.name()));
    let _ = std::fs::remove_dir_all(&scratch);
    std::fs::create_dir_all(&scratch).map_err(|e| RunError::Io(scratch.display().to_string(), e))?;
    let out = spawn_ranks(program.ranks(), world, |ctx| rank_program(program, backing, &scratch, &ctx));
    let _ = std::fs::remove_dir_all(&scratch);
    let out = out?;
    if !out.leaked_windows.is_empty() {
        return Err(RunError::Leaked(out.leaked_windows));
    }
    let mut windows = Vec::new();
    let mut gets: Vec<(usize, Vec<u8>)> = Vec::new();
    for (bytes, g) in out.results {
        windows.push(bytes);
        gets.extend(g);
    }
    gets.sort_by_key(|(i, _)| *i);
    Ok(Outcome {
        windows,
        gets: gets.into_iter().map(|(_, b)| b).collect(),
    })
}
