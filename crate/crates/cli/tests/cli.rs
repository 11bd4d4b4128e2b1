use std::fs;
use std::process::{Command, Output};

use fpcost::harness;
use fpcost::OutcomeClass;

fn fpcost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpcost"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn avx() -> bool {
    is_x86_feature_detected!("avx")
}

#[test]
fn env_check_decodes_and_restores() {
    let o = fpcost(&["env-check", "--ftz", "--daz"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("applied: mxcsr="), "{text}");
    let applied = text.lines().find(|l| l.starts_with("applied")).unwrap();
    assert!(applied.contains("ftz=1 daz=1"));
    let current = text.lines().find(|l| l.starts_with("current")).unwrap();
    let restored = text.lines().find(|l| l.starts_with("restored")).unwrap();
    assert_eq!(current["current".len()..], restored["restored".len()..]);
}

#[test]
fn dump_kernels_shows_timed_loop() {
    let o = fpcost(&["dump-kernels", "--ops", "add", "--variant", "asm"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("vaddpd ymm9, ymm1, ymm5"), "{text}");
    assert!(text.contains("rdtscp"));
    let all = stdout(&fpcost(&["dump-kernels"]));
    assert!(all.contains("vfmadd231pd") && all.contains("vdivpd") && all.contains("vmovapd"));
}

#[test]
fn run_render_compare_pipeline() {
    if !avx() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.jsonl");
    let results_arg = results.to_str().unwrap();
    let o = fpcost(&[
        "run",
        "-q",
        "--ops",
        "add",
        "--classes",
        "normalized,underflow",
        "--variant",
        "asm",
        "--samples",
        "3",
        "--warmups",
        "1",
        "--scalar-ops",
        "1000000",
        "--calibrate-ms",
        "20",
        "--out",
        results_arg,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = harness::read_records(&fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records
        .iter()
        .all(|r| r.is_ok() && r.mxcsr.is_some() && r.operands.is_some()));
    assert_eq!(records[2].cell.outcome, OutcomeClass::Underflow);

    let md = stdout(&fpcost(&["render", results_arg]));
    assert!(md.contains("| Addition | underflow |"), "{md}");
    let csv = stdout(&fpcost(&[
        "render",
        "--format",
        "csv",
        "--columns",
        "no-fd",
        results_arg,
    ]));
    assert_eq!(csv.lines().count(), 3);

    let cmp = fpcost(&["compare", "--machine", "sandybridge", results_arg]);
    assert!(cmp.status.success());
    let text = stdout(&cmp);
    assert!(text.contains("Reference machine: sandybridge"));
    assert!(text.contains("(reference 152.80x)"), "{text}");

    let unknown = fpcost(&["compare", "--machine", "skylake", results_arg]);
    assert!(unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown machine"));
    assert!(stdout(&unknown).contains("none (ratios only)"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(!fpcost(&["render", empty.to_str().unwrap()]).status.success());
    assert!(!fpcost(&["render", dir.path().join("missing").to_str().unwrap()])
        .status
        .success());
    assert!(!fpcost(&["run", "--samples", "2"]).status.success());
    assert!(!fpcost(&["run", "--ops", "sqrt"]).status.success());
    assert!(!fpcost(&["run", "--ftz", "--env", "fd"]).status.success());
}
