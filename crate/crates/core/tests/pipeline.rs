use std::path::PathBuf;
use std::sync::OnceLock;

use seqcad::detector::{detect_slice, DetectorConfig, ScorerModel, SliceDetection};
use seqcad::geometry::{Box2D, VolumeGeometry};
use seqcad::mlgs::forest::ForestModel;
use seqcad::mlgs::{extract_motion_features, forest_predict};
use seqcad::phantom::{generate_phantom, suite_geometry, PhantomObject, PhantomSpec};
use seqcad::pipeline::report::report_json;
use seqcad::pipeline::{read_json, read_mhd, run_pipeline, write_mhd, InputConfig, PipelineConfig, RunOutcome};
use seqcad::tracks::Track;

struct Shared {
    dir: tempfile::TempDir,
    base: RunOutcome,
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::new(5);
    cfg.input = InputConfig::Suite { seed: 7, n_scans: 3 };
    cfg.training.n_scans = 8;
    cfg
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.output_dir = Some(dir.path().join("base"));
        let base = run_pipeline(&cfg).unwrap();
        Shared { dir, base }
    })
}

/// Small config that reuses the models trained by the shared run.
fn pretrained_config() -> PipelineConfig {
    let out = shared().dir.path().join("base");
    let mut cfg = small_config();
    cfg.training.scorer_model = Some(out.join("scorer.json"));
    cfg.training.forest_model = Some(out.join("forest.json"));
    cfg
}

#[test]
fn outputs_are_written() {
    let out = shared().dir.path().join("base");
    for f in [
        "report.json",
        "report.txt",
        "timings.json",
        "froc.json",
        "froc.csv",
        "froc_plot.dat",
        "candidates.csv",
        "tracks.jsonl",
        "detections.jsonl",
        "scorer.json",
        "forest.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(!report.contains("total_ms") && !report.contains("training_ms"), "timings leaked into the report");
}

#[test]
fn counts_are_consistent() {
    let r = &shared().base.report;
    let c = &r.counts;
    assert_eq!(c.scans, 3);
    assert_eq!(c.kept + c.removed, c.post_msp_tracks);
    assert_eq!(c.final_candidates, c.kept);
    assert_eq!(c.tracked_detections, c.detections);
    assert!(c.post_msp_tracks <= c.post_detection_tracks);
    assert!(r.final_stage.false_positives <= r.candidate_stage.false_positives);
    assert!((0.0..=1.0).contains(&r.froc.average));
}

#[test]
fn report_is_independent_of_worker_count() {
    let mut cfg = pretrained_config();
    cfg.workers = 1;
    let a = run_pipeline(&cfg).unwrap();
    cfg.workers = 3;
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(report_json(&a.report).unwrap(), report_json(&b.report).unwrap());
}

#[test]
fn pretrained_models_reproduce_the_run() {
    let a = run_pipeline(&pretrained_config()).unwrap();
    let base = &shared().base.report;
    assert_eq!(a.report.counts, base.counts);
    assert_eq!(a.report.froc, base.froc);
}

#[test]
fn ablations_move_the_expected_way() {
    let base = &shared().base.report;

    let mut no_msp = pretrained_config();
    no_msp.msp.enabled = false;
    let r = run_pipeline(&no_msp).unwrap().report;
    assert_eq!(r.counts.propagated_detections, 0);
    assert!(r.counts.post_msp_tracks >= base.counts.post_msp_tracks);

    let mut no_mlgs = pretrained_config();
    no_mlgs.mlgs.enabled = false;
    let r = run_pipeline(&no_mlgs).unwrap().report;
    assert_eq!(r.counts.removed, 0);
    assert!(r.counts.final_candidates >= base.counts.final_candidates);
    assert!(r.final_stage.false_positives >= base.final_stage.false_positives);
}

#[test]
fn detector_finds_an_isolated_nodule() {
    let out = shared().dir.path().join("base");
    let scorer: ScorerModel = read_json(&out.join("scorer.json")).unwrap();
    let spec = PhantomSpec {
        series_id: "solo".into(),
        geom: suite_geometry(),
        background_hu: -800.0,
        noise_sigma: 20.0,
        objects: vec![PhantomObject::Nodule {
            center: [5.0, -10.0, -90.0],
            diameter: 10.0,
            intensity: 600.0,
        }],
        seed: 3,
    };
    let ph = generate_phantom(&spec).unwrap();
    let k = ph.volume.geom.world_to_nearest_voxel([5.0, -10.0, -90.0])[2] as usize;
    let truth = ph.slice_truths[k][0];
    let dets = detect_slice(&ph.volume.slice(k), "solo", k, &scorer, &DetectorConfig::default()).unwrap();
    let best = &dets[0];
    assert!((best.bbox.cx - truth.cx).hypot(best.bbox.cy - truth.cy) < 0.5 * truth.w, "{best:?} vs {truth:?}");
    assert!(best.score > 0.5);
}

#[test]
fn mhd_round_trip_of_a_phantom() {
    let spec = &seqcad::phantom::benchmark_suite(1, 1)[0];
    let ph = generate_phantom(spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p: PathBuf = dir.path().join("scan.mhd");
    write_mhd(&p, &ph.volume).unwrap();
    assert_eq!(read_mhd(&p).unwrap(), ph.volume);
}

fn straight_track(n: usize, side: f64, score: f64) -> Track {
    Track {
        series_id: "s".into(),
        members: (0..n)
            .map(|i| SliceDetection {
                series_id: "s".into(),
                slice: 20 + i,
                bbox: Box2D::square(64.0, 64.0, side).unwrap(),
                score,
                propagated: false,
            })
            .collect(),
    }
}

#[test]
fn forest_prefers_persistent_tracks_over_transients() {
    let out = shared().dir.path().join("base");
    let forest: ForestModel = read_json(&out.join("forest.json")).unwrap();
    let geom: VolumeGeometry = suite_geometry();
    let nodule = straight_track(10, 12.0, 0.9);
    let transient = straight_track(1, 12.0, 0.9);
    let p_nodule = forest_predict(&forest, &extract_motion_features(&nodule, &geom)).unwrap();
    let p_transient = forest_predict(&forest, &extract_motion_features(&transient, &geom)).unwrap();
    assert!(p_nodule > p_transient, "{p_nodule} vs {p_transient}");
}
