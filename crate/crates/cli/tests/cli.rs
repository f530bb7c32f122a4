use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[model]
input_len = 100

[compile.segment]
segment_seconds = 1.0

[verify]
random_cases = 2000
decomposition_lines = 200
cic_samples = 500
model_inputs = 3

[synthetic]
stages = [2, 2, 0, 2]
"#;

fn muxnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muxnet"))
        .current_dir(dir)
        .args(["--config", "small.toml"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn compiled(dir: &Path, name: &str, constant: Option<&str>) {
    let float = format!("{name}.muxf");
    let mut args = vec!["gen-model", "--out", &float];
    if let Some(c) = constant {
        args.extend(["--constant-class", c]);
    }
    ok(&muxnet(dir, &args));
    ok(&muxnet(dir, &["compile", "--model", &float, "--out", &format!("{name}.muxn")]));
}

#[test]
fn compile_report_matches_cost_model() {
    let dir = setup();
    let d = dir.path();
    ok(&muxnet(d, &["gen-model", "--out", "m.muxf"]));
    let report = ok(&muxnet(d, &["compile", "--model", "m.muxf", "--out", "m.muxn", "--report"]));
    let bits: u64 = report
        .lines()
        .find_map(|l| l.strip_prefix("weight_memory_bits="))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    let cost = ok(&muxnet(d, &["cost", "--model", "m.muxn"]));
    let total = cost.lines().find(|l| l.starts_with("total,")).unwrap();
    let col: u64 = total.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(bits, col);
    // Per-layer rows are m*n bits per chunk.
    for row in report.lines().skip(1).filter(|l| l.contains("conv1d") || l.contains("linear")) {
        let f: Vec<u64> = row.split(',').filter_map(|x| x.parse().ok()).collect();
        // layer, m, chunks, muxnet bits, lut bits
        assert_eq!(f[3], f[2] * f[1] * 2);
        assert_eq!(f[4], f[2] * (f[1] * 4 + f[1] * 2));
    }
}

#[test]
fn corrupt_model_is_an_input_error() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("junk.muxf"), b"definitely not a model").unwrap();
    let out = muxnet(d, &["compile", "--model", "junk.muxf", "--out", "x.muxn"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BadArtifact"));

    compiled(d, "m", None);
    let bytes = std::fs::read(d.join("m.muxn")).unwrap();
    std::fs::write(d.join("cut.muxn"), &bytes[..bytes.len() / 2]).unwrap();
    let out = muxnet(d, &["cost", "--model", "cut.muxn"]);
    assert_eq!(out.status.code(), Some(2));
    let out = muxnet(d, &["cost", "--model", "missing.muxn"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_reports_counts() {
    let dir = setup();
    let text = ok(&muxnet(dir.path(), &["verify"]));
    assert!(text.contains("exhaustive n=2 m=3       cases=1024 mismatches=0"), "{text}");
    assert!(text.contains("0 failed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_fault_injection_fails_with_counterexample() {
    let dir = setup();
    let out = muxnet(dir.path(), &["verify", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL  exhaustive n=2 m=3"), "{text}");
    assert!(text.contains("first counterexample: codes=[-3, 0]"), "{text}");
}

#[test]
fn loop_logs_pulses_and_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    compiled(d, "nrem", Some("2"));
    let args = ["loop", "--model", "nrem.muxn", "--synthetic", "9", "--trace", "trace.csv"];
    let a = ok(&muxnet(d, &args));
    let b = ok(&muxnet(d, &args));
    assert_eq!(a, b);
    let pulses = a.lines().filter(|l| l.contains("\"kind\":\"pulse_on\"")).count();
    let decisions = a.lines().filter(|l| l.contains("\"kind\":\"decision\"")).count();
    assert_eq!(decisions, 4);
    // 1 s schedules, 6 s epochs: every decision starts a fresh schedule.
    assert_eq!(pulses, 40);
    let first_pulse = a.lines().find(|l| l.contains("pulse_on")).unwrap();
    assert!(first_pulse.contains("\"t_exact\":\"4/1\""), "{first_pulse}");
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 16);

    let silent = ok(&muxnet(d, &["loop", "--model", "nrem.muxn", "--synthetic", "9", "--trigger-classes", ""]));
    assert_eq!(silent.lines().filter(|l| l.contains("pulse")).count(), 0);
    assert_eq!(silent.lines().count(), 4);
}

#[test]
fn loop_config_inconsistency_exits_3() {
    let dir = setup();
    let d = dir.path();
    compiled(d, "m", None);
    std::fs::write(d.join("bad.toml"), "input_rate_hz = 1000.0\n[model]\ninput_len = 100\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_muxnet"))
        .current_dir(d)
        .args(["--config", "bad.toml", "loop", "--model", "m.muxn", "--synthetic", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LoopConfigError"));

    std::fs::write(d.join("typo.toml"), "sede = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_muxnet"))
        .current_dir(d)
        .args(["--config", "typo.toml", "cost"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_scores_labeled_signal() {
    let dir = setup();
    let d = dir.path();
    compiled(d, "nrem", Some("2"));
    ok(&muxnet(d, &["gen-signal", "--out", "s.muxs", "--labels", "l.txt"]));
    let out = muxnet(d, &["eval", "--model", "nrem.muxn", "--signal", "s.muxs", "--labels", "l.txt"]);
    let report = ok(&out);
    assert_eq!(report.lines().count(), 5);
    assert!(report.starts_with("epoch,stage,classifications_used,vote_0"));
    // Three of the four labeled epochs are stage 2.
    assert!(String::from_utf8_lossy(&out.stderr).contains("accuracy=0.7500"));

    std::fs::write(d.join("short.txt"), "2\n").unwrap();
    let out = muxnet(d, &["eval", "--model", "nrem.muxn", "--signal", "s.muxs", "--labels", "short.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cost_sweep_rows() {
    let dir = setup();
    let csv = ok(&muxnet(dir.path(), &["cost"]));
    let lines: Vec<&str> = csv.lines().collect();
    // Header, then 4 layers + total for each of n = 1, 2.
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines[0].starts_with("layer,n,m,"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("total,")).count(), 2);
}

#[test]
fn dump_table_and_config() {
    let dir = setup();
    let d = dir.path();
    let table = ok(&muxnet(d, &["dump-table", "--n", "2", "--m", "2"]));
    assert_eq!(table.lines().count(), 16);
    assert_eq!(table.lines().nth(1).unwrap(), "1 : 0 1 0 1");
    let out = muxnet(d, &["dump-table", "--n", "4", "--m", "5"]);
    assert_eq!(out.status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_muxnet"))
        .current_dir(d)
        .arg("--dump-config")
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(text.contains("input_rate_hz = 800.0"));
    std::fs::write(d.join("dumped.toml"), &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_muxnet"))
        .current_dir(d)
        .args(["--config", "dumped.toml", "--dump-config"])
        .output()
        .unwrap();
    assert_eq!(ok(&again), text);
}
