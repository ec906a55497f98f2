use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ftcaqr_core::gen::random_matrix;

const GRID: [&str; 8] = [
    "--rows", "32", "--cols", "16", "--panel", "4", "--ranks", "4",
];

fn ftcaqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftcaqr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_grid<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(GRID);
    v.extend(extra);
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .to_string()
}

#[test]
fn factor_reports_small_backward_error() {
    let o = ftcaqr(&with_grid("factor", &["--seed", "7", "--mode", "ft"]));
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(value(&out, "backward_error").parse::<f64>().unwrap() <= 1e-12);
    assert_eq!(value(&out, "exchanges"), "28");
    assert_eq!(value(&out, "redundancy_by_step"), "2 4");
}

#[test]
fn inject_lists_one_single_peer_recovery() {
    let o = ftcaqr(&with_grid(
        "inject",
        &["--fault", "2@TSQR:0:0:BEFORE_EXCHANGE"],
    ));
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(value(&out, "recoveries"), "1");
    assert_eq!(value(&out, "recovery"), "2 0 TSQR 0 3");
}

#[test]
fn sweep_passes_every_point() {
    let o = ftcaqr(&with_grid("sweep", &[]));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("passed 112/112"));
}

#[test]
fn verify_against_oracle() {
    let o = ftcaqr(&with_grid("verify", &["--mode", "baseline", "--seed", "3"]));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ftcaqr(&["factor", "--rows", "32"]).status.code(), Some(2));
    assert_eq!(
        ftcaqr(&with_grid("factor", &["--mode", "fast"]))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ftcaqr(&with_grid("inject", &["--fault", "2@TSQR"]))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(ftcaqr(&with_grid("inject", &[])).status.code(), Some(2));
    let o = ftcaqr(&[
        "factor", "--rows", "32", "--cols", "16", "--panel", "3", "--ranks", "4",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baseline_failure_exits_3() {
    let o = ftcaqr(&with_grid(
        "inject",
        &[
            "--mode",
            "baseline",
            "--fault",
            "1@TRAILING:0:0:AFTER_EXCHANGE",
        ],
    ));
    assert_eq!(o.status.code(), Some(3));
}

fn files_of_run(dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let trace = dir.join(format!("{tag}.trace"));
    let report = dir.join(format!("{tag}.report"));
    let (t, r) = (trace.to_str().unwrap(), report.to_str().unwrap());
    let o = ftcaqr(&with_grid(
        "inject",
        &[
            "--seed",
            "11",
            "--fault",
            "3@TRAILING:1:0:AFTER_EXCHANGE",
            "--trace",
            t,
            "--report",
            r,
        ],
    ));
    assert_eq!(o.status.code(), Some(0));
    (fs::read(trace).unwrap(), fs::read(report).unwrap())
}

#[test]
fn identical_argv_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = files_of_run(dir.path(), "a");
    let b = files_of_run(dir.path(), "b");
    assert_eq!(a, b);
    let first = String::from_utf8(a.0).unwrap();
    let line = first.lines().next().unwrap();
    assert_eq!(line.split(' ').count(), 9, "{line}");
}

#[test]
fn trace_subcommand_writes_to_stdout() {
    let o = ftcaqr(&with_grid("trace", &[]));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.contains(" EXCHANGE ")));
}

#[test]
fn raw_input_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let a = random_matrix(32, 16, 5);
    let bytes: Vec<u8> = a.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).unwrap();
    let from_file = ftcaqr(&with_grid("factor", &["--input", path.to_str().unwrap()]));
    let seeded = ftcaqr(&with_grid("factor", &["--seed", "5"]));
    assert_eq!(from_file.status.code(), Some(0));
    assert_eq!(stdout(&from_file), stdout(&seeded));

    fs::write(&path, [0u8; 7]).unwrap();
    let short = ftcaqr(&with_grid("factor", &["--input", path.to_str().unwrap()]));
    assert_eq!(short.status.code(), Some(2));
}
