use std::path::Path;
use std::process::{Command, Output};

const GOLDEN_HEADER: &str = "mode,kernel,elements,block_elements,rep,seconds,mb_per_s,stall_count\n";

fn storwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storwin"))
        .args(args)
        .arg("--path")
        .arg(dir)
        .env_remove("STORWIN_RANKS")
        .env_remove("STORWIN_WATCHDOG_MS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn csv_has_golden_header_and_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let o = storwin(
        dir.path(),
        &["bench", "--modes", "memory,storage", "--elements", "20000", "--reps", "3", "--csv", csv.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(GOLDEN_HEADER));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 4 * 3);
    for r in &rows {
        assert_eq!(r.split(',').count(), 8, "{r}");
    }
    assert!(rows[0].starts_with("memory,copy,20000,"));
    assert!(rows[23].starts_with("storage,triad,20000,"));
    // scratch files are gone, only the csv is left
    let left: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("out.csv")]);
}

#[test]
fn csv_defaults_to_the_working_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = storwin(dir.path(), &["bench", "--modes", "explicit_io,storage_blocked", "--elements", "5000", "--block-elements", "1000", "--reps", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4 * 3);
    assert!(text.contains("explicit_io,triad,5000,1000,2,"));
    assert!(stdout(&o).contains("speedup storage_blocked over explicit_io"));
}

#[test]
fn exit_code_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing_dir = d.join("no/such/dir/out.csv");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["--help"], 0),
        (vec!["--version"], 0),
        (vec!["bench", "--help"], 0),
        (vec![], 64),
        (vec!["frobnicate"], 64),
        (vec!["bench", "--modes", "bogus"], 64),
        (vec!["bench", "--no-such-flag"], 64),
        (vec!["bench", "--reps", "0"], 64),
        (vec!["verify", "--ranks", "0"], 64),
        (vec!["verify", "--inject", "nonsense"], 64),
        (vec!["bench", "--sync-mode", "sometimes"], 64),
        (vec!["bench", "--dirty-limit-bytes", "0"], 64),
        // 24 * 10^7 bytes cannot fit a 1 MB budget in memory mode
        (vec!["bench", "--modes", "memory", "--memory-budget-bytes", "1000000"], 64),
        (vec!["bench", "--modes", "memory", "--elements", "100", "--reps", "1", "--csv", missing_dir.to_str().unwrap()], 1),
        (vec!["verify", "--programs", "3"], 0),
        (vec!["verify", "--programs", "3", "--inject", "skip-sync"], 2),
        (vec!["recover-demo", "--elements", "4096"], 0),
        (vec!["recover-demo", "--elements", "4096", "--inject", "delete-sidecar"], 1),
        (vec!["recover-demo", "--elements", "4096", "--inject", "corrupt-sidecar"], 1),
        (vec!["recover-demo", "--elements", "4096", "--inject", "corrupt-byte"], 2),
    ];
    for (args, want) in cases {
        let o = storwin(d, &args);
        assert_eq!(code(&o), want, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn verify_transcript_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = || storwin(dir.path(), &["verify", "--seed", "7", "--programs", "40"]);
    let (a, b) = (run(), run());
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    let lines: Vec<String> = stdout(&a).lines().map(str::to_owned).collect();
    let names: Vec<&str> = lines.iter().map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(names, ["rma-oracle", "transparency", "durability", "hybrid-routing", "flush-policy"]);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")));
}

#[test]
fn skip_sync_fails_only_durability() {
    let dir = tempfile::tempdir().unwrap();
    let o = storwin(dir.path(), &["verify", "--programs", "5", "--inject", "skip-sync"]);
    assert_eq!(code(&o), 2);
    let failed: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(str::to_owned).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("durability"));
}

#[test]
fn recover_demo_in_two_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let one = storwin(dir.path(), &["recover-demo", "--phase", "1", "--ranks", "3", "--seed", "11"]);
    assert_eq!(code(&one), 0);
    let two = storwin(dir.path(), &["recover-demo", "--phase", "2", "--ranks", "3", "--seed", "11"]);
    assert_eq!(code(&two), 0, "{}", String::from_utf8_lossy(&two.stderr));
    assert_eq!(stdout(&two).trim(), format!("recovered {} bytes, verified", 3 << 20));
    // a different seed expects a different pattern
    let wrong = storwin(dir.path(), &["recover-demo", "--phase", "2", "--ranks", "3", "--seed", "12"]);
    assert_eq!(code(&wrong), 2);
}

#[test]
fn ranks_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_storwin"))
        .args(["recover-demo", "--elements", "1000", "--path"])
        .arg(dir.path())
        .env("STORWIN_RANKS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().last().unwrap(), "recovered 2000 bytes, verified");
}
