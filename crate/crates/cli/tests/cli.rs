use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqcad::mlgs::forest::{train_forest, ForestParams};
use seqcad::mlgs::{motion_feature_names, MOTION_FEATURE_SCHEMA, N_MOTION_FEATURES};
use seqcad::pipeline::write_json;

fn seqcad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcad")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = seqcad(&["evaluate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_file_fails_with_message() {
    let o = seqcad(&["evaluate", "--candidates", "/nonexistent.csv", "--annotations", "/nonexistent.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn evaluate_prints_the_froc_table() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.csv");
    let cands = dir.path().join("cands.csv");
    fs::write(&ann, "seriesuid,coordX,coordY,coordZ,diameter_mm\na,0,0,0,10\na,50,0,0,10\n").unwrap();
    // One hit at 0.9, a false positive at 0.8, the second truth at 0.3.
    fs::write(
        &cands,
        "seriesuid,coordX,coordY,coordZ,probability\na,1,1,1,0.9\na,-40,-40,0,0.8\na,52,0,0,0.3\n",
    )
    .unwrap();
    let out = dir.path().join("froc");
    let o = seqcad(&["evaluate", "--candidates", p(&cands), "--annotations", p(&ann), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row = |rate: &str| {
        text.lines()
            .find(|l| l.split_whitespace().next() == Some(rate))
            .and_then(|l| l.split_whitespace().nth(1))
            .map(|v| v.parse::<f64>().unwrap())
            .unwrap()
    };
    // One scan: 1 FP/scan is reached only once both truths are found.
    assert_eq!(row("0.125"), 0.5);
    assert_eq!(row("0.500"), 0.5);
    assert_eq!(row("1.000"), 1.0);
    assert_eq!(row("8.000"), 1.0);
    assert!((row("average") - (3.0 * 0.5 + 4.0) / 7.0).abs() < 1e-4);
    for f in ["froc.json", "froc.csv", "froc_plot.dat"] {
        assert!(out.join(f).is_file());
    }
}

#[test]
fn importance_report_is_ranked() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| (0..N_MOTION_FEATURES).map(|j| ((i * 7 + j * 13) % 17) as f64).collect())
        .collect();
    let labels: Vec<bool> = rows.iter().map(|r| r[3] + r[10] > 16.0).collect();
    let forest = train_forest(
        &rows,
        &labels,
        &motion_feature_names(),
        MOTION_FEATURE_SCHEMA,
        &ForestParams { n_trees: 10, mtry: 6, seed: 1 },
    )
    .unwrap();
    let model = dir.path().join("forest.json");
    write_json(&model, &forest).unwrap();

    let o = seqcad(&["report", "importance", "--model", p(&model), "--top", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let values: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 5);
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn small_pipeline_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(
        &cfg,
        r#"{
  "master_seed": 3,
  "input": {"kind": "suite", "seed": 7, "n_scans": 2},
  "training": {"n_scans": 4, "scorer": {"epochs": 100}},
  "mlgs": {"n_trees": 20}
}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = seqcad(&["pipeline", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("FROC"));
    for f in ["report.json", "report.txt", "timings.json", "candidates.csv", "tracks.jsonl", "scorer.json", "forest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let o = seqcad(&["report", "run", "--report", p(&out.join("report.json"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("sensitivity"));
}
