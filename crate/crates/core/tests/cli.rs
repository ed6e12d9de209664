mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use lambdasim::scenarios::{
    export_report, run_with, LadderReport, Part, ReportFormat, RunReport, ScenarioConfig, ScenarioError, CSV_COLUMNS,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lambdasim"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn run_writes_a_json_report_that_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    let trace = dir.path().join("b.jsonl");
    let status = bin()
        .args(["run", "--part", "b", "--seed", "7", "--config"])
        .arg(configs().join("ladder.yaml"))
        .arg("--out")
        .arg(&out)
        .arg("--trace")
        .arg(&trace)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let report: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.part, Part::B);
    assert_eq!(report.seed, 7);
    assert!(report.complete);
    let again: RunReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);

    // every trace line is a standalone JSON object
    let lines = std::fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().count() > 0);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.is_object());
    }
}

#[test]
fn cli_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.json");
    let cfg_path = configs().join("ladder.yaml");
    let status = bin()
        .args(["run", "--part", "d", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let from_cli: RunReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();

    let mut cfg = ScenarioConfig::load(&cfg_path).unwrap();
    cfg.part = Part::D;
    let (e, w) = lambdasim::scenarios::load_inputs(&cfg).unwrap();
    let lib = run_with(&cfg, &e, &w).unwrap().report;
    assert_eq!(from_cli, lib);
}

#[test]
fn ladder_csv_has_one_row_per_part() {
    let out = bin()
        .args(["ladder", "--format", "csv", "--config"])
        .arg(configs().join("ladder.yaml"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    let parts: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(parts, ["a", "b", "c", "d", "e", "f"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("good_result="));
}

#[test]
fn ladder_json_classification_agrees_with_the_runs() {
    let out = bin().args(["ladder", "--config"]).arg(configs().join("ladder.yaml")).output().unwrap();
    assert!(out.status.success());
    let ladder: LadderReport = serde_json::from_slice(&out.stdout).unwrap();
    let ms = |p: Part| ladder.runs.iter().find(|r| r.part == p).unwrap().makespan;
    assert_eq!(ladder.classification.good_result, ms(Part::E) < ms(Part::B));
    assert_eq!(ladder.classification.best_result, ms(Part::F) < ms(Part::A));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let (cfg, e, w) = common::best_result_fixture();
    let report = run_with(&cfg, &e, &w).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing").join("r.json");
    let err = export_report(&report, &bad, ReportFormat::Json).unwrap_err();
    assert!(matches!(err, ScenarioError::Io { .. }), "{err}");

    let status = bin()
        .args(["run", "--config"])
        .arg(configs().join("ladder.yaml"))
        .arg("--out")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("lambdasim:"));
}

#[test]
fn bad_config_is_rejected_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.yaml");
    std::fs::write(&cfg, "part: a\nseed: 1\nno_such_key: 3\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    let out = bin().args(["run", "--part", "z"]).output().unwrap();
    assert!(!out.status.success());
}
