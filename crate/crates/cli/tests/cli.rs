use camd_core::design_loop::{summarize, RunRecord};
use camd_core::gnn::PropertyPrediction;
use camd_core::io::{read_records, write_records, Report};
use std::path::Path;
use std::process::{Command, Output};

const DATASET: &str = "\
smiles,ron,mon,dcn
CC,108,101,
C1CC1,102,85,
COC(C)(C)C,118,101,
CCOC(C)(C)C,118,102,
CC(C)OC(C)(C)C,112,98,
CC(C)(C)C=O,101,92,
COC(C)C=O,96,84,
COC(C)(C)OC,110,96,
CCc1cccc(C)c1,110,98,
CC(C=O)C(C)(C)C,99,88,
COC(C)(C)C=O,104,93,
CCOC(C)(C)C=O,103,91,
";

fn camd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camd"))
        .env("CAMD_LOG", "warn")
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn full_pipeline_respects_total_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("data.csv"), DATASET).unwrap();

    let out = camd(d, &["train-gnn", "--out", "m", "--dataset", "data.csv", "--ensemble-size", "2", "--epochs", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = camd(d, &["fit-ad", "--out", "m", "--dataset", "data.csv", "--checkpoint", "m/checkpoint.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = camd(
        d,
        &["run-loop", "--out", "r", "--checkpoint", "m/checkpoint.json", "--corpus", "data.csv", "--max-total", "10"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(d.join("r/records.ndjson")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(d.join("r/summary.json").exists());

    let out = camd(d, &["report", "--out", "rep", "--records", "r/records.ndjson"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(d.join("rep/report.json")).unwrap()).unwrap();
    let records = read_records(&d.join("r/records.ndjson")).unwrap();
    assert_eq!(report.summary, summarize(&records));
}

#[test]
fn fit_ad_without_gnn_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("data.csv"), DATASET).unwrap();
    std::fs::write(d.join("empty.json"), r#"{"version": 1, "grammar_hash": "x", "gnn": null, "ad": null}"#).unwrap();
    let out = camd(d, &["fit-ad", "--out", "m", "--dataset", "data.csv", "--checkpoint", "empty.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint missing GNN section"));
}

#[test]
fn run_loop_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = camd(dir.path(), &["run-loop", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
}

fn record(iteration: usize, smiles: &str, ron: f64, mon: f64, vote: i64) -> RunRecord {
    let p = PropertyPrediction::new(ron, mon, 0.0);
    RunRecord {
        iteration,
        latent_reduced: None,
        latent: vec![0.0; 4],
        smiles: Some(smiles.into()),
        score: 2.0 * ron - mon,
        predictions: Some(p),
        in_ad: Some(true),
        vote_sum: Some(vote),
        duplicate: false,
        penalty_applied: false,
        fault: None,
    }
}

#[test]
fn report_lists_promising_molecules() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let records = vec![
        record(0, "COC(C)(C)C", 115.0, 101.0, 30),
        record(1, "CCOC(C)(C)C", 112.0, 102.0, 12),
        record(2, "CC(C)(C)C=O", 110.0, 95.0, 8),
        record(3, "COC(C)(C)C", 115.0, 101.0, 30),
    ];
    write_records(&d.join("records.ndjson"), &records).unwrap();
    let out = camd(d, &["report", "--out", "rep", "--records", "records.ndjson"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("COC(C)(C)C"));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(d.join("rep/report.json")).unwrap()).unwrap();
    let smiles: Vec<&str> = report.promising.iter().map(|p| p.smiles.as_str()).collect();
    assert_eq!(smiles, ["COC(C)(C)C"]);
    assert_eq!(report.summary.promising, summarize(&records).promising);
    assert_eq!(report.summary.promising, 1);
}
