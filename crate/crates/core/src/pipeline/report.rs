use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::PATCH_FEATURE_SCHEMA;
use crate::froc::FrocSummary;
use crate::mlgs::MOTION_FEATURE_SCHEMA;
use crate::pipeline::formats::{write_candidates, write_json, write_jsonl};
use crate::pipeline::run::RunOutcome;
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "seqcad-report-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub seqcad: String,
    pub patch_features: String,
    pub motion_features: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            seqcad: env!("CARGO_PKG_VERSION").to_string(),
            patch_features: PATCH_FEATURE_SCHEMA.to_string(),
            motion_features: MOTION_FEATURE_SCHEMA.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub scans: usize,
    pub scorer_samples: usize,
    pub scorer_positives: usize,
    pub scorer_final_loss: Option<f64>,
    pub forest_tracks: usize,
    pub forest_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub scans: usize,
    pub truths: usize,
    pub slices: usize,
    pub detections: usize,
    /// Original detections found in the final tracks; equals `detections`.
    pub tracked_detections: usize,
    pub propagated_detections: usize,
    pub post_detection_tracks: usize,
    pub post_msp_tracks: usize,
    pub kept: usize,
    pub removed: usize,
    pub final_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub candidates: usize,
    pub candidates_per_scan: f64,
    pub detected_truths: usize,
    pub sensitivity: f64,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub series_id: String,
    pub slices: usize,
    pub truths: usize,
    pub detections: usize,
    pub post_detection_tracks: usize,
    pub post_msp_tracks: usize,
    pub kept: usize,
    pub removed: usize,
}

/// Deterministic run summary; wall-clock timings live in [`Timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub versions: Versions,
    pub config: serde_json::Value,
    pub training: TrainingSummary,
    pub counts: CountSummary,
    /// Tracks linked from raw detections, before MSP and MLGS.
    pub candidate_stage: StageMetrics,
    pub final_stage: StageMetrics,
    /// Share of candidate-stage false positives absent from the final set.
    pub fp_reduction: f64,
    pub sensitivity_drop_pp: f64,
    pub froc: FrocSummary,
    pub ap_2d: Option<f64>,
    pub series: Vec<SeriesSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub training_ms: f64,
    /// Summed over series.
    pub stages: BTreeMap<String, f64>,
    pub mlgs_ms_per_300_tracks: f64,
}

pub fn report_json(r: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(r)?;
    s.push('\n');
    Ok(s)
}

pub fn render_froc_table(f: &FrocSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>10}  {:>11}", "FP/scan", "sensitivity");
    for (r, v) in f.rates.iter().zip(&f.sensitivities) {
        let _ = writeln!(s, "{r:>10.3}  {v:>11.4}");
    }
    let _ = writeln!(s, "{:>10}  {:>11.4}", "average", f.average);
    s
}

pub fn render_text(r: &RunReport, t: Option<&Timings>) -> String {
    let c = &r.counts;
    let mut s = String::new();
    let _ = writeln!(s, "seqcad run report ({})", r.versions.seqcad);
    let _ = writeln!(s, "scans {}  truths {}  slices {}", c.scans, c.truths, c.slices);
    let _ = writeln!(
        s,
        "detections {}  propagated {}  tracks: post-detection {}  post-msp {}",
        c.detections, c.propagated_detections, c.post_detection_tracks, c.post_msp_tracks
    );
    let _ = writeln!(s, "mlgs kept {}  removed {}  final {}", c.kept, c.removed, c.final_candidates);
    for (name, m) in [("candidate stage", &r.candidate_stage), ("final", &r.final_stage)] {
        let _ = writeln!(
            s,
            "{name:<16} sensitivity {:.4} ({}/{})  candidates/scan {:.2}  false positives {}",
            m.sensitivity, m.detected_truths, c.truths, m.candidates_per_scan, m.false_positives
        );
    }
    let _ = writeln!(
        s,
        "false-positive reduction {:.1}%  sensitivity drop {:.2} pp",
        100.0 * r.fp_reduction,
        r.sensitivity_drop_pp
    );
    if let Some(ap) = r.ap_2d {
        let _ = writeln!(s, "2D average precision {ap:.4}");
    }
    let _ = writeln!(s, "\nFROC ({:?} rule)", r.froc.interpolation);
    s.push_str(&render_froc_table(&r.froc));
    if let Some(t) = t {
        let _ = writeln!(s, "\ntimings (ms): total {:.1}  training {:.1}", t.total_ms, t.training_ms);
        for (k, v) in &t.stages {
            let _ = writeln!(s, "  {k:<10} {v:.1}");
        }
        let _ = writeln!(s, "  mlgs per 300 tracks {:.3}", t.mlgs_ms_per_300_tracks);
    }
    s
}

/// froc.json, froc.csv and a two-column plot-data file.
pub fn write_froc_files(dir: &Path, f: &FrocSummary) -> Result<()> {
    write_json(&dir.join("froc.json"), f)?;
    let mut csv = String::from("threshold,fp_per_scan,sensitivity\n");
    let mut plot = String::from("# fp_per_scan sensitivity\n");
    for p in &f.curve {
        let _ = writeln!(csv, "{},{},{}", p.threshold, p.fp_per_scan, p.sensitivity);
        let _ = writeln!(plot, "{} {}", p.fp_per_scan, p.sensitivity);
    }
    fs::write(dir.join("froc.csv"), csv).map_err(|e| Error::io(dir.join("froc.csv"), e))?;
    fs::write(dir.join("froc_plot.dat"), plot).map_err(|e| Error::io(dir.join("froc_plot.dat"), e))
}

pub fn write_outputs(dir: &Path, o: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.json");
    fs::write(&p, report_json(&o.report)?).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("report.txt");
    fs::write(&p, render_text(&o.report, Some(&o.timings))).map_err(|e| Error::io(&p, e))?;
    write_json(&dir.join("timings.json"), &o.timings)?;
    write_froc_files(dir, &o.report.froc)?;
    write_candidates(&dir.join("candidates.csv"), &o.final_candidates())?;
    write_jsonl(&dir.join("tracks.jsonl"), &o.tracks())?;
    write_jsonl(&dir.join("detections.jsonl"), &o.detections())?;
    write_json(&dir.join("scorer.json"), &o.scorer)?;
    if let Some(f) = &o.forest {
        write_json(&dir.join("forest.json"), f)?;
    }
    Ok(())
}
