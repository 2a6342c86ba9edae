use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    describe_slice, select_detections, train_scorer, DescribedProposal, DetectorConfig, LogFilterBank,
    ScorerModel, ScorerTrainConfig, SliceDetection, SliceDetector, PATCH_FEATURE_SCHEMA,
};
use crate::froc::{average_precision_2d, froc_curve, match_candidates, Outcome, SliceTruth};
use crate::geometry::{Box2D, VolumeGeometry};
use crate::mlgs::{
    extract_motion_features, label_tracks, suppress, train_motion_forest, ForestModel, ForestParams, MlgsConfig,
    Suppression, MOTION_FEATURE_SCHEMA,
};
use crate::msp::{propagate_with, MspConfig};
use crate::phantom::{benchmark_suite, generate_phantom, nodule_slice_truths, GroundTruthNodule, PhantomSpec};
use crate::pipeline::config::{InputConfig, PipelineConfig};
use crate::pipeline::formats::{read_annotations, read_json, read_mhd};
use crate::pipeline::report::{
    CountSummary, RunReport, SeriesSummary, StageMetrics, Timings, TrainingSummary, Versions, REPORT_SCHEMA,
};
use crate::seeds;
use crate::tracks::{link_tracks, split_at_gaps, track_to_candidate3d, Candidate3D, Track};
use crate::volume::Volume;
use crate::{Error, Result};

/// Where one scan comes from.
#[derive(Debug, Clone)]
pub enum ScanSource {
    Phantom(PhantomSpec),
    Mhd {
        series_id: String,
        path: PathBuf,
        truths: Vec<GroundTruthNodule>,
    },
}

impl ScanSource {
    pub fn series_id(&self) -> &str {
        match self {
            ScanSource::Phantom(s) => &s.series_id,
            ScanSource::Mhd { series_id, .. } => series_id,
        }
    }

    pub fn load(&self) -> Result<(Volume, Vec<GroundTruthNodule>)> {
        match self {
            ScanSource::Phantom(spec) => {
                let p = generate_phantom(spec)?;
                Ok((p.volume, p.truths))
            }
            ScanSource::Mhd { path, truths, .. } => Ok((read_mhd(path)?, truths.clone())),
        }
    }
}

/// Evaluation scans in series-id order.
pub fn input_sources(input: &InputConfig) -> Result<Vec<ScanSource>> {
    let mut out = match input {
        InputConfig::Suite { seed, n_scans } => {
            benchmark_suite(*seed, *n_scans).into_iter().map(ScanSource::Phantom).collect()
        }
        InputConfig::Volumes { volumes, annotations } => {
            let truths = read_annotations(annotations)?;
            volumes
                .iter()
                .map(|p| {
                    let id = p
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .ok_or_else(|| Error::invalid(format!("bad volume path {}", p.display())))?
                        .to_string();
                    Ok(ScanSource::Mhd {
                        truths: truths.iter().filter(|t| t.series_id == id).cloned().collect(),
                        series_id: id,
                        path: p.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    out.sort_by(|a, b| a.series_id().cmp(b.series_id()));
    if out.windows(2).any(|w| w[0].series_id() == w[1].series_id()) {
        return Err(Error::invalid("duplicate series ids in the input"));
    }
    Ok(out)
}

/// A scan after proposal and patch description, before scoring.
#[derive(Debug, Clone)]
pub struct DescribedScan {
    pub series_id: String,
    pub geom: VolumeGeometry,
    pub truths: Vec<GroundTruthNodule>,
    pub slice_truths: Vec<Vec<Box2D>>,
    pub slices: Vec<Vec<DescribedProposal>>,
}

pub fn describe_volume(
    volume: &Volume,
    series_id: &str,
    truths: Vec<GroundTruthNodule>,
    cfg: &DetectorConfig,
) -> Result<DescribedScan> {
    let [nx, ny, nz] = volume.geom.dims;
    let bank = LogFilterBank::new(ny, nx, &cfg.proposal)?;
    let slices = (0..nz)
        .into_par_iter()
        .map(|k| describe_slice(&volume.slice(k), &bank, &cfg.proposal))
        .collect::<Result<Vec<_>>>()?;
    Ok(DescribedScan {
        series_id: series_id.to_string(),
        geom: volume.geom.clone(),
        slice_truths: nodule_slice_truths(&truths, &volume.geom),
        truths,
        slices,
    })
}

impl DescribedScan {
    pub fn detect(&self, model: &ScorerModel, cfg: &DetectorConfig) -> Vec<SliceDetection> {
        self.slices
            .iter()
            .enumerate()
            .flat_map(|(k, d)| select_detections(d, model, cfg, &self.series_id, k))
            .collect()
    }

    pub fn slice_truth_list(&self) -> Vec<SliceTruth> {
        self.slice_truths
            .iter()
            .enumerate()
            .flat_map(|(k, bs)| {
                bs.iter().map(move |b| SliceTruth {
                    series_id: self.series_id.clone(),
                    slice: k,
                    bbox: *b,
                })
            })
            .collect()
    }
}

/// Training label of a proposal: its centre lies inside a truth cross-section
/// and its size is within a factor of two of that cross-section.
pub fn proposal_is_positive(b: &Box2D, truths: &[Box2D]) -> bool {
    truths.iter().any(|t| {
        let dist = (b.cx - t.cx).hypot(b.cy - t.cy);
        let ratio = b.extent() / t.extent();
        dist < 0.5 * t.w.min(t.h) && (0.5..=2.0).contains(&ratio)
    })
}

pub fn scorer_dataset(scans: &[DescribedScan]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in scans {
        for (k, props) in s.slices.iter().enumerate() {
            for p in props {
                xs.push(p.features.0.to_vec());
                ys.push(proposal_is_positive(&p.proposal.bbox, &s.slice_truths[k]));
            }
        }
    }
    (xs, ys)
}

/// Links detections into tracks. With MSP, linking bridges gaps up to `w`,
/// propagation fills them and tracks are then split at any remaining gap;
/// without MSP, only adjacent slices link.
pub fn build_tracks<F>(dets: &[SliceDetection], link_iou: f64, msp: Option<&MspConfig>, rescore: Option<F>) -> Vec<Track>
where
    F: Fn(&SliceDetection) -> f64,
{
    match msp {
        None => link_tracks(dets, link_iou, 0),
        Some(m) => split_at_gaps(&propagate_with(&link_tracks(dets, link_iou, m.w), m, rescore)),
    }
}

fn msp_of(cfg: &PipelineConfig) -> Option<MspConfig> {
    cfg.msp.enabled.then(|| cfg.msp.params())
}

/// Tracks of one scan; propagated members are rescored against the volume when configured.
fn scan_tracks(
    cfg: &PipelineConfig,
    source: &ScanSource,
    dets: &[SliceDetection],
    model: &ScorerModel,
    geom: &VolumeGeometry,
) -> Result<Vec<Track>> {
    let msp = msp_of(cfg);
    if msp.is_some() && cfg.msp.rescore {
        let (volume, _) = source.load()?;
        let [nx, ny, _] = geom.dims;
        let det = SliceDetector::new(ny, nx, model, &cfg.detector)?;
        let hook = |d: &SliceDetection| det.rescore(&volume.slice(d.slice), &d.bbox);
        Ok(build_tracks(dets, cfg.link_iou, msp.as_ref(), Some(hook)))
    } else {
        Ok(build_tracks(dets, cfg.link_iou, msp.as_ref(), None::<fn(&SliceDetection) -> f64>))
    }
}

/// One candidate per track scored by the track's best still-image score.
pub fn still_candidates(tracks: &[Track], geom: &VolumeGeometry) -> Vec<Candidate3D> {
    tracks
        .iter()
        .map(|t| track_to_candidate3d(t, geom, t.max_score()))
        .collect()
}

pub struct TrainedModels {
    pub scorer: ScorerModel,
    pub forest: Option<ForestModel>,
    pub summary: TrainingSummary,
}

pub fn training_suite_seed(master_seed: u64) -> u64 {
    seeds::derive(master_seed, "training-suite", 0)
}

fn describe_sources(sources: &[ScanSource], cfg: &DetectorConfig) -> Result<Vec<DescribedScan>> {
    sources
        .par_iter()
        .map(|s| {
            let (v, truths) = s.load().map_err(|e| e.in_stage("load", s.series_id()))?;
            describe_volume(&v, s.series_id(), truths, cfg).map_err(|e| e.in_stage("describe", s.series_id()))
        })
        .collect()
}

/// Trains (or loads) the still-image scorer and the forest on a phantom suite
/// disjoint from the evaluation data.
pub fn train_models(cfg: &PipelineConfig) -> Result<TrainedModels> {
    let mut summary = TrainingSummary::default();
    let need_scorer = cfg.training.scorer_model.is_none();
    let need_forest = cfg.mlgs.enabled && cfg.training.forest_model.is_none();
    let sources: Vec<ScanSource> = if need_scorer || need_forest {
        benchmark_suite(training_suite_seed(cfg.master_seed), cfg.training.n_scans)
            .into_iter()
            .map(ScanSource::Phantom)
            .collect()
    } else {
        Vec::new()
    };
    summary.scans = sources.len();
    let scans = describe_sources(&sources, &cfg.detector)?;

    let scorer = match &cfg.training.scorer_model {
        Some(p) => load_scorer(p)?,
        None => {
            let (xs, ys) = scorer_dataset(&scans);
            let tcfg = ScorerTrainConfig {
                seed: seeds::derive(cfg.master_seed, "scorer", 0),
                ..cfg.training.scorer.clone()
            };
            let t = train_scorer(&xs, &ys, PATCH_FEATURE_SCHEMA, &tcfg).map_err(|e| e.in_stage("train-scorer", "training-suite"))?;
            summary.scorer_samples = xs.len();
            summary.scorer_positives = ys.iter().filter(|&&y| y).count();
            summary.scorer_final_loss = t.losses.last().copied();
            t.model
        }
    };

    let forest = if !cfg.mlgs.enabled {
        None
    } else if let Some(p) = &cfg.training.forest_model {
        Some(load_forest(p)?)
    } else {
        let per_scan = scans
            .par_iter()
            .zip(&sources)
            .map(|(s, src)| {
                let dets = s.detect(&scorer, &cfg.detector);
                let tracks = scan_tracks(cfg, src, &dets, &scorer, &s.geom)?;
                let labels = label_tracks(&tracks, &s.geom, &s.truths);
                let feats: Vec<_> = tracks.iter().map(|t| extract_motion_features(t, &s.geom)).collect();
                Ok((feats, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, y): (Vec<_>, Vec<_>) = per_scan.into_iter().flat_map(|(f, l)| f.into_iter().zip(l)).unzip();
        summary.forest_tracks = x.len();
        summary.forest_positives = y.iter().filter(|&&v| v).count();
        let params = forest_params(&cfg.mlgs, cfg.master_seed);
        Some(train_motion_forest(&x, &y, &params).map_err(|e| e.in_stage("train-rf", "training-suite"))?)
    };
    Ok(TrainedModels { scorer, forest, summary })
}

pub fn forest_params(m: &MlgsConfig, master_seed: u64) -> ForestParams {
    ForestParams {
        n_trees: m.n_trees,
        mtry: m.mtry,
        seed: seeds::derive(master_seed, "forest", 0),
    }
}

pub fn load_scorer(path: &Path) -> Result<ScorerModel> {
    let m: ScorerModel = read_json(path)?;
    m.validate()?;
    if m.schema_version != PATCH_FEATURE_SCHEMA {
        return Err(Error::SchemaMismatch {
            expected: PATCH_FEATURE_SCHEMA.into(),
            actual: m.schema_version,
        });
    }
    Ok(m)
}

pub fn load_forest(path: &Path) -> Result<ForestModel> {
    let m: ForestModel = read_json(path)?;
    m.validate()?;
    if m.schema_version != MOTION_FEATURE_SCHEMA {
        return Err(Error::SchemaMismatch {
            expected: MOTION_FEATURE_SCHEMA.into(),
            actual: m.schema_version,
        });
    }
    Ok(m)
}

/// Everything produced for one series.
#[derive(Debug, Clone)]
pub struct SeriesResult {
    pub series_id: String,
    pub n_slices: usize,
    pub truths: Vec<GroundTruthNodule>,
    pub slice_truths: Vec<SliceTruth>,
    pub detections: Vec<SliceDetection>,
    pub post_detection: Vec<Candidate3D>,
    pub tracks: Vec<Track>,
    pub suppression: Suppression,
    pub detect_ms: f64,
    pub track_ms: f64,
    pub mlgs_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn process_series(
    cfg: &PipelineConfig,
    source: &ScanSource,
    scorer: &ScorerModel,
    forest: Option<&ForestModel>,
) -> Result<SeriesResult> {
    let id = source.series_id();
    let t0 = Instant::now();
    let (volume, truths) = source.load().map_err(|e| e.in_stage("load", id))?;
    let scan = describe_volume(&volume, id, truths, &cfg.detector).map_err(|e| e.in_stage("detect", id))?;
    let detections = scan.detect(scorer, &cfg.detector);
    let detect_ms = ms(t0);

    let t1 = Instant::now();
    let post_detection = still_candidates(&link_tracks(&detections, cfg.link_iou, 0), &scan.geom);
    let tracks = scan_tracks(cfg, source, &detections, scorer, &scan.geom).map_err(|e| e.in_stage("msp", id))?;
    let track_ms = ms(t1);

    let t2 = Instant::now();
    let suppression = match forest {
        Some(f) => suppress(&tracks, f, cfg.mlgs.threshold, &scan.geom, cfg.mlgs.score_mode)
            .map_err(|e| e.in_stage("mlgs", id))?,
        None => Suppression {
            kept: still_candidates(&tracks, &scan.geom),
            removed: Vec::new(),
            probabilities: Vec::new(),
        },
    };
    let mlgs_ms = ms(t2);

    Ok(SeriesResult {
        series_id: id.to_string(),
        n_slices: scan.slices.len(),
        slice_truths: scan.slice_truth_list(),
        truths: scan.truths,
        detections,
        post_detection,
        tracks,
        suppression,
        detect_ms,
        track_ms,
        mlgs_ms,
    })
}

/// Sensitivity and false-positive counts of a candidate set (threshold-free).
pub fn stage_metrics(cands: &[Candidate3D], truths: &[GroundTruthNodule], n_scans: usize) -> StageMetrics {
    let a = match_candidates(cands, truths);
    let detected = a.detected_by.iter().filter(|d| d.is_some()).count();
    StageMetrics {
        candidates: cands.len(),
        candidates_per_scan: cands.len() as f64 / n_scans as f64,
        detected_truths: detected,
        sensitivity: if truths.is_empty() { 0.0 } else { detected as f64 / truths.len() as f64 },
        false_positives: a.outcomes.iter().filter(|o| **o == Outcome::Fp).count(),
    }
}

/// Full output of a run.
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: Timings,
    pub scorer: ScorerModel,
    pub forest: Option<ForestModel>,
    pub series: Vec<SeriesResult>,
}

impl RunOutcome {
    pub fn final_candidates(&self) -> Vec<Candidate3D> {
        self.series.iter().flat_map(|s| s.suppression.kept.iter().cloned()).collect()
    }

    pub fn tracks(&self) -> Vec<Track> {
        self.series.iter().flat_map(|s| s.tracks.iter().cloned()).collect()
    }

    pub fn detections(&self) -> Vec<SliceDetection> {
        self.series.iter().flat_map(|s| s.detections.iter().cloned()).collect()
    }
}

/// Runs training (when needed) and the full per-series pipeline, then evaluates.
/// Writes the outputs when `cfg.output_dir` is set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| run_inner(cfg))?;
    if let Some(dir) = &cfg.output_dir {
        crate::pipeline::report::write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn run_inner(cfg: &PipelineConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let sources = input_sources(&cfg.input)?;
    let t_train = Instant::now();
    let models = train_models(cfg)?;
    let training_ms = ms(t_train);

    let series: Vec<SeriesResult> = sources
        .par_iter()
        .map(|s| process_series(cfg, s, &models.scorer, models.forest.as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let t_eval = Instant::now();
    let n_scans = series.len();
    let truths: Vec<GroundTruthNodule> = series.iter().flat_map(|s| s.truths.iter().cloned()).collect();
    let post_detection: Vec<Candidate3D> = series.iter().flat_map(|s| s.post_detection.iter().cloned()).collect();
    let finals: Vec<Candidate3D> = series.iter().flat_map(|s| s.suppression.kept.iter().cloned()).collect();
    let dets: Vec<SliceDetection> = series.iter().flat_map(|s| s.detections.iter().cloned()).collect();
    let slice_truths: Vec<SliceTruth> = series.iter().flat_map(|s| s.slice_truths.iter().cloned()).collect();

    let candidate_stage = stage_metrics(&post_detection, &truths, n_scans);
    let final_stage = stage_metrics(&finals, &truths, n_scans);
    let froc = froc_curve(&finals, &truths, n_scans, &cfg.eval.froc).map_err(|e| e.in_stage("evaluate", "all"))?;
    let ap_2d = if slice_truths.is_empty() {
        None
    } else {
        Some(average_precision_2d(&dets, &slice_truths, cfg.eval.ap_match_iou)?)
    };
    let evaluate_ms = ms(t_eval);

    let counts = CountSummary {
        scans: n_scans,
        truths: truths.len(),
        slices: series.iter().map(|s| s.n_slices).sum(),
        detections: dets.len(),
        tracked_detections: series
            .iter()
            .flat_map(|s| &s.tracks)
            .flat_map(|t| &t.members)
            .filter(|m| !m.propagated)
            .count(),
        propagated_detections: series
            .iter()
            .flat_map(|s| &s.tracks)
            .flat_map(|t| &t.members)
            .filter(|m| m.propagated)
            .count(),
        post_detection_tracks: post_detection.len(),
        post_msp_tracks: series.iter().map(|s| s.tracks.len()).sum(),
        kept: series.iter().map(|s| s.suppression.kept.len()).sum(),
        removed: series.iter().map(|s| s.suppression.removed.len()).sum(),
        final_candidates: finals.len(),
    };
    let fp_reduction = if candidate_stage.false_positives == 0 {
        0.0
    } else {
        1.0 - final_stage.false_positives as f64 / candidate_stage.false_positives as f64
    };
    let per_series = series
        .iter()
        .map(|s| SeriesSummary {
            series_id: s.series_id.clone(),
            slices: s.n_slices,
            truths: s.truths.len(),
            detections: s.detections.len(),
            post_detection_tracks: s.post_detection.len(),
            post_msp_tracks: s.tracks.len(),
            kept: s.suppression.kept.len(),
            removed: s.suppression.removed.len(),
        })
        .collect();

    let mut stages = BTreeMap::new();
    stages.insert("detect".to_string(), series.iter().map(|s| s.detect_ms).sum());
    stages.insert("track_msp".to_string(), series.iter().map(|s| s.track_ms).sum());
    stages.insert("mlgs".to_string(), series.iter().map(|s| s.mlgs_ms).sum());
    stages.insert("evaluate".to_string(), evaluate_ms);
    let mlgs_total: f64 = series.iter().map(|s| s.mlgs_ms).sum();
    let timings = Timings {
        total_ms: ms(start),
        training_ms,
        stages,
        mlgs_ms_per_300_tracks: if counts.post_msp_tracks == 0 {
            0.0
        } else {
            mlgs_total * 300.0 / counts.post_msp_tracks as f64
        },
    };

    let report = RunReport {
        schema: REPORT_SCHEMA.to_string(),
        versions: Versions::current(),
        config: cfg.echo(),
        training: models.summary,
        counts,
        candidate_stage: candidate_stage.clone(),
        final_stage: final_stage.clone(),
        fp_reduction,
        sensitivity_drop_pp: 100.0 * (candidate_stage.sensitivity - final_stage.sensitivity),
        froc,
        ap_2d,
        series: per_series,
    };
    Ok(RunOutcome {
        report,
        timings,
        scorer: models.scorer,
        forest: models.forest,
        series,
    })
}

/// One row of the (gamma, k) sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub ratio_k: usize,
    pub final_loss: f64,
    pub ap_2d: f64,
    pub detections_per_scan: f64,
    pub candidate_sensitivity: f64,
    pub candidates_per_scan: f64,
}

/// Trains one scorer per `(gamma, k)` on the training suite and measures the
/// still-image detector on the evaluation input.
pub fn sweep(cfg: &PipelineConfig, gammas: &[f64], ks: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let train_sources: Vec<ScanSource> = benchmark_suite(training_suite_seed(cfg.master_seed), cfg.training.n_scans)
            .into_iter()
            .map(ScanSource::Phantom)
            .collect();
        let train = describe_sources(&train_sources, &cfg.detector)?;
        let eval = describe_sources(&input_sources(&cfg.input)?, &cfg.detector)?;
        let (xs, ys) = scorer_dataset(&train);
        let truths: Vec<GroundTruthNodule> = eval.iter().flat_map(|s| s.truths.iter().cloned()).collect();
        let slice_truths: Vec<SliceTruth> = eval.iter().flat_map(|s| s.slice_truth_list()).collect();
        let grid: Vec<(f64, usize)> = gammas.iter().flat_map(|&g| ks.iter().map(move |&k| (g, k))).collect();
        grid.par_iter()
            .map(|&(gamma, ratio_k)| {
                let tcfg = ScorerTrainConfig {
                    gamma,
                    ratio_k,
                    seed: seeds::derive(cfg.master_seed, "scorer", 0),
                    ..cfg.training.scorer.clone()
                };
                let t = train_scorer(&xs, &ys, PATCH_FEATURE_SCHEMA, &tcfg)?;
                let dets: Vec<Vec<SliceDetection>> = eval.iter().map(|s| s.detect(&t.model, &cfg.detector)).collect();
                let cands: Vec<Candidate3D> = eval
                    .iter()
                    .zip(&dets)
                    .flat_map(|(s, d)| still_candidates(&link_tracks(d, cfg.link_iou, 0), &s.geom))
                    .collect();
                let all: Vec<SliceDetection> = dets.into_iter().flatten().collect();
                let m = stage_metrics(&cands, &truths, eval.len());
                Ok(SweepRow {
                    gamma,
                    ratio_k,
                    final_loss: t.losses.last().copied().unwrap_or(f64::NAN),
                    ap_2d: if slice_truths.is_empty() { 0.0 } else { average_precision_2d(&all, &slice_truths, cfg.eval.ap_match_iou)? },
                    detections_per_scan: all.len() as f64 / eval.len() as f64,
                    candidate_sensitivity: m.sensitivity,
                    candidates_per_scan: m.candidates_per_scan,
                })
            })
            .collect()
    })
}
