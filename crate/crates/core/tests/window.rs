use std::fs;
use std::time::Duration;

use proptest::prelude::*;
use storwin::hints::{ALLOC_TYPE, MEMORY_BYTES, STORAGE_PATH};
use storwin::{spawn_ranks, win_allocate, AllocationKind, HintSet, WindowError, WorldConfig, ALLOC_KIND_ATTR};

fn world() -> WorldConfig {
    WorldConfig::default().with_watchdog(Duration::from_secs(20))
}

#[test]
fn default_hints_give_zeroed_memory() {
    let out = spawn_ranks(1, world(), |ctx| -> Result<_, WindowError> {
        let mut w = win_allocate(1024, 8, &HintSet::new(), &ctx)?;
        assert_eq!(w.kind(), &AllocationKind::Memory);
        let bytes = w.local_read(0, 1024)?;
        w.free()?;
        Ok(bytes)
    })
    .unwrap();
    assert_eq!(out.results[0], vec![0; 1024]);
    assert!(out.leaked_windows.is_empty());
}

#[test]
fn storage_window_creates_its_file_and_free_writes_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.dat");
    spawn_ranks(1, world(), |ctx| -> Result<_, WindowError> {
        let mut w = win_allocate(4096, 8, &HintSet::storage(&path), &ctx)?;
        assert!(fs::metadata(&path).unwrap().len() >= 4096);
        let kind = AllocationKind::decode(&w.attr_get(ALLOC_KIND_ATTR).unwrap()).unwrap();
        assert_eq!(kind.name(), "storage");
        w.local_write(100, &[0xEE; 50])?;
        w.free()
    })
    .unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[100..150], &[0xEE; 50][..]);
    assert!(bytes[..100].iter().all(|&b| b == 0));
}

#[test]
fn memory_free_creates_no_files() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_current_dir(dir.path()).unwrap();
    spawn_ranks(2, world(), |ctx| -> Result<_, WindowError> {
        let mut w = win_allocate(256, 1, &HintSet::memory(), &ctx)?;
        w.free()
    })
    .unwrap();
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn zero_size_window_is_legal() {
    let out = spawn_ranks(2, world(), |ctx| -> Result<_, WindowError> {
        let size = if ctx.rank() == 0 { 0 } else { 64 };
        let mut w = win_allocate(size, 1, &HintSet::new(), &ctx)?;
        let n = w.size_bytes();
        w.free()?;
        Ok(n)
    })
    .unwrap();
    assert_eq!(out.results, vec![0, 64]);
}

#[test]
fn allocation_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let hybrid = HintSet::hybrid(dir.path().join("w.dat"), 1000);
    let out = spawn_ranks(1, world(), |ctx| -> Result<_, String> {
        let e1 = win_allocate(1000, 8, &hybrid, &ctx).unwrap_err();
        let e2 = win_allocate(64, 8, &HintSet::new().with(ALLOC_TYPE, "storage"), &ctx).unwrap_err();
        let e3 = win_allocate(60, 8, &HintSet::new(), &ctx).unwrap_err();
        Ok((e1, e2, e3))
    })
    .unwrap();
    let (e1, e2, e3) = &out.results[0];
    assert!(matches!(e1, WindowError::HybridSplitInvalid { memory_bytes: 1000, size_bytes: 1000 }));
    assert!(matches!(e2, WindowError::StoragePathInvalid));
    assert!(matches!(e3, WindowError::InvalidDispUnit { .. }));
    assert!(out.leaked_windows.is_empty());
}

#[test]
fn one_failing_rank_fails_everyone() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing").join("w.dat");
    let out = spawn_ranks(3, world(), |ctx| -> Result<_, String> {
        let hints = if ctx.rank() == 2 {
            HintSet::storage(&bad)
        } else {
            HintSet::memory()
        };
        Ok(win_allocate(64, 1, &hints, &ctx).unwrap_err())
    })
    .unwrap();
    for e in &out.results {
        assert!(matches!(e, WindowError::AllocationFailed { rank: 2, .. }), "{e}");
    }
    assert!(out.leaked_windows.is_empty());
}

#[test]
fn attributes() {
    spawn_ranks(1, world(), |ctx| -> Result<_, WindowError> {
        let mut w = win_allocate(8, 1, &HintSet::new(), &ctx)?;
        assert_eq!(w.attr_get("no.such.key"), None);
        w.attr_set("user.k", b"v".to_vec())?;
        assert_eq!(w.attr_get("user.k"), Some(b"v".to_vec()));
        w.attr_set("app.epoch", b"3".to_vec())?;
        assert!(matches!(w.attr_set(ALLOC_KIND_ATTR, b"x".to_vec()), Err(WindowError::ReservedKey(_))));
        assert!(matches!(w.attr_set("", b"v".to_vec()), Err(WindowError::EmptyKey)));
        assert!(w.attr_get(ALLOC_KIND_ATTR).is_some());
        assert_eq!(w.descriptor().attributes.len(), 3);
        w.free()
    })
    .unwrap();
}

#[test]
fn open_epoch_blocks_free() {
    spawn_ranks(2, world(), |ctx| -> Result<_, String> {
        let mut w = win_allocate(8, 1, &HintSet::new(), &ctx).map_err(|e| e.to_string())?;
        w.fence().map_err(|e| e.to_string())?;
        assert!(matches!(w.free(), Err(WindowError::EpochOpen)));
        w.fence_close().map_err(|e| e.to_string())?;
        w.free().map_err(|e| e.to_string())
    })
    .unwrap();
}

#[test]
fn ranks_sharing_a_path_get_disjoint_regions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shared.dat");
    spawn_ranks(3, world(), |ctx| -> Result<_, WindowError> {
        let size = 1000 + 8 * ctx.rank() as u64;
        let mut w = win_allocate(size, 1, &HintSet::storage(&path), &ctx)?;
        w.local_write(0, &vec![ctx.rank() as u8 + 1; size as usize])?;
        w.free()
    })
    .unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 1000 + 1008 + 1016);
    assert!(bytes[..1000].iter().all(|&b| b == 1));
    assert!(bytes[1000..2008].iter().all(|&b| b == 2));
    assert!(bytes[2008..].iter().all(|&b| b == 3));
    for r in 0..3 {
        assert!(storwin::window::shared_sidecar_path(&path, r).exists());
    }
}

#[test]
fn ranks_may_choose_different_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = spawn_ranks(3, world(), |ctx| -> Result<_, WindowError> {
        let hints = match ctx.rank() {
            0 => HintSet::memory(),
            1 => HintSet::storage(dir.path().join("one.dat")),
            _ => HintSet::hybrid(dir.path().join("two.dat"), 16),
        };
        let mut w = win_allocate(64, 8, &hints, &ctx)?;
        let name = w.kind().name();
        w.free()?;
        Ok(name)
    })
    .unwrap();
    assert_eq!(out.results, vec!["memory", "storage", "hybrid"]);
}

fn junk_key() -> impl Strategy<Value = String> {
    "[a-z_]{1,12}".prop_filter("not a recognized key", |k| {
        ![ALLOC_TYPE, STORAGE_PATH, MEMORY_BYTES, "storage_offset", "sync_mode"].contains(&k.as_str())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn empty_hints_always_mean_memory(units in 0u64..64, disp in prop::sample::select(vec![1u64, 2, 4, 8, 16])) {
        let size = units * disp;
        let out = spawn_ranks(1, world(), |ctx| -> Result<_, WindowError> {
            let mut w = win_allocate(size, disp, &HintSet::new(), &ctx)?;
            let k = w.kind().clone();
            w.free()?;
            Ok(k)
        }).unwrap();
        prop_assert_eq!(&out.results[0], &AllocationKind::Memory);
    }

    #[test]
    fn unknown_hints_change_nothing(
        junk in prop::collection::btree_map(junk_key(), "[ -~]{0,16}", 0..5),
        kind in 0usize..3,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let base = match kind {
            0 => HintSet::memory(),
            1 => HintSet::storage(dir.path().join("w.dat")),
            _ => HintSet::hybrid(dir.path().join("w.dat"), 24),
        };
        let noisy = junk.iter().fold(base.clone(), |h, (k, v)| h.with(k.clone(), v.clone()));
        let out = spawn_ranks(1, world(), |ctx| -> Result<_, WindowError> {
            let mut descs = Vec::new();
            for h in [&base, &noisy] {
                let mut w = win_allocate(64, 8, h, &ctx)?;
                let mut d = w.descriptor();
                d.win_id = 0;
                descs.push(d);
                w.free()?;
            }
            Ok(descs)
        }).unwrap();
        let d = &out.results[0];
        prop_assert_eq!(&d[0], &d[1]);
    }
}
