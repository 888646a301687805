use std::path::Path;
use std::process::{Command, Output};

fn fleetsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fleetsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const SPEC: &str = "\
duration_hours = 0.25
start_weekday = 1
start_hour = 10
seed = 3
stream.llama2-70b.us-east.IW-F.base_rps = 0.4
stream.llama2-70b.us-west.IW-N.base_rps = 0.3
stream.llama3.1-8b.us-central.NIW.base_rps = 0.2
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
    std::fs::write(
        dir.path().join("exp.txt"),
        "initial_instances = 3\nsolver_budget_sec = 5\n",
    )
    .unwrap();
    dir
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn missing_trace_exits_2() {
    let dir = setup();
    let out = fleetsim(dir.path(), &["run", "--trace", "nope.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn gen_validate_run_round_trip() {
    let dir = setup();
    let gen = fleetsim(
        dir.path(),
        &["--out", "t.csv", "gen-trace", "--synthetic", "spec.txt"],
    );
    assert!(
        gen.status.success(),
        "{}",
        String::from_utf8_lossy(&gen.stderr)
    );
    let trace = lines(&dir.path().join("t.csv"));
    assert_eq!(
        trace[0],
        "arrival_ts_ms,model,region,tier,input_tokens,output_tokens"
    );

    let v = fleetsim(dir.path(), &["validate-trace", "--trace", "t.csv"]);
    assert!(v.status.success());
    let report = String::from_utf8_lossy(&v.stdout);
    assert!(
        report.contains(&format!("records,{}", trace.len() - 1)),
        "{report}"
    );
    assert!(report.contains("unsorted,0"));

    let run = fleetsim(
        dir.path(),
        &[
            "--config",
            "exp.txt",
            "--out",
            "d",
            "run",
            "--strategy",
            "lt-ua",
            "--trace",
            "t.csv",
            "--scheduler",
            "dpa",
            "--tau-n",
            "30",
        ],
    );
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    for f in [
        "summary.csv",
        "instances.csv",
        "latency_bins.csv",
        "plans.csv",
    ] {
        let l = lines(&dir.path().join("d").join(f));
        assert!(!l.is_empty() && l[0].contains(','), "{f}");
    }
    let summary = lines(&dir.path().join("d/summary.csv"));
    assert_eq!(summary.len(), 2);
    assert!(summary[1].starts_with("lt-ua,"));
}

#[test]
fn compare_writes_one_row_per_strategy() {
    let dir = setup();
    let out = fleetsim(
        dir.path(),
        &[
            "--config",
            "exp.txt",
            "--out",
            "c",
            "--seed",
            "4",
            "compare",
            "--synthetic",
            "spec.txt",
            "--strategies",
            "reactive,lt-i,lt-u,lt-ua",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = lines(&dir.path().join("c/summary.csv"));
    let names: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["reactive", "lt-i", "lt-u", "lt-ua"]);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.txt"), "epsilonn = 0.5\n").unwrap();
    let out = fleetsim(
        dir.path(),
        &["--config", "bad.txt", "run", "--synthetic", "spec.txt"],
    );
    assert_eq!(out.status.code(), Some(1));
}
