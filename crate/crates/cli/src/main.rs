use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqcad::detector::{ScorerTrainConfig, SliceDetector, PATCH_FEATURE_SCHEMA};
use seqcad::froc::{froc_curve, FrocOptions, Interpolation};
use seqcad::geometry::VolumeGeometry;
use seqcad::mlgs::{
    extract_motion_features, label_tracks, suppress, train_motion_forest, ForestParams, ScoreMode,
    MOTION_FEATURE_NAMES,
};
use seqcad::msp::MspConfig;
use seqcad::phantom::{benchmark_suite, generate_phantom, suite_geometry, GroundTruthNodule};
use seqcad::pipeline::report::{render_froc_table, write_froc_files};
use seqcad::pipeline::run::{load_forest, load_scorer, scorer_dataset, training_suite_seed, DescribedScan};
use seqcad::pipeline::{
    read_annotations, read_candidates, read_json, read_jsonl, read_mhd, render_text, run_pipeline, sweep,
    write_annotations, write_candidates, write_json, write_jsonl, write_mhd, PipelineConfig, RunReport, Timings,
};
use seqcad::tracks::{link_tracks, split_at_gaps, Track, DEFAULT_LINK_IOU};
use seqcad::{detector, msp, seeds, Error, Result};

#[derive(Parser)]
#[command(name = "seqcad", version, about = "Sequence-aware nodule candidate detection and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom suite as MetaImage volumes plus annotations.csv.
    Phantom(PhantomArgs),
    /// Train the still-image scorer on a generated phantom suite.
    TrainScorer(TrainScorerArgs),
    /// Run the still-image detector on one volume.
    Detect(DetectArgs),
    /// Link per-slice detections into tracks.
    Link(LinkArgs),
    /// Fill short gaps in tracks (multi-slice propagation).
    Msp(MspArgs),
    /// Train the motion-feature random forest on labelled tracks.
    TrainRf(TrainRfArgs),
    /// Score tracks with the forest and split them into kept and removed candidates.
    Suppress(SuppressArgs),
    /// FROC evaluation of a candidates CSV against annotations.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline from a JSON config.
    Pipeline(PipelineArgs),
    /// Print a report from saved outputs.
    Report(ReportArgs),
    /// Sweep the focal-loss exponent and resampling ratio.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Suite seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of scans.
    #[arg(long, default_value_t = 20)]
    scans: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainScorerArgs {
    /// Master seed; the training suite and resampling seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training scans.
    #[arg(long, default_value_t = 40)]
    scans: usize,
    /// Focal-loss exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Negative-to-positive ratio k.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Optional pipeline config supplying the proposal settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Input .mhd volume.
    #[arg(long)]
    volume: PathBuf,
    /// Scorer model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Series id written into each detection (default: file stem).
    #[arg(long)]
    series: Option<String>,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    response_floor: Option<f64>,
    /// Output detections JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LinkArgs {
    /// Detections JSONL.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LINK_IOU)]
    link_iou: f64,
    /// Missing slices a link may bridge.
    #[arg(long, default_value_t = 0)]
    max_gap: usize,
    /// Output tracks JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MspArgs {
    /// Tracks JSONL (typically linked with --max-gap equal to the window).
    #[arg(long)]
    tracks: PathBuf,
    /// Window: the largest gap filled.
    #[arg(long, default_value_t = 2)]
    w: usize,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    #[arg(long, default_value_t = 3)]
    min_nodule_extent: usize,
    /// Output tracks JSONL, split at unfilled gaps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeometryArg {
    /// Volume whose geometry applies to the tracks (default: phantom suite geometry).
    #[arg(long)]
    volume: Option<PathBuf>,
}

impl GeometryArg {
    fn geometry(&self) -> Result<VolumeGeometry> {
        match &self.volume {
            Some(p) => Ok(read_mhd(p)?.geom),
            None => Ok(suite_geometry()),
        }
    }
}

#[derive(Args)]
struct TrainRfArgs {
    /// Tracks JSONL.
    #[arg(long)]
    tracks: PathBuf,
    /// Annotations CSV used to label tracks.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 6)]
    mtry: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    geometry: GeometryArg,
    /// Also write the labelled feature matrix as CSV.
    #[arg(long)]
    features_csv: Option<PathBuf>,
    /// Output forest JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuppressArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Forest JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Final score: rf, still or product.
    #[arg(long, default_value = "rf")]
    score_mode: ScoreMode,
    #[command(flatten)]
    geometry: GeometryArg,
    /// Kept candidates CSV.
    #[arg(long)]
    out: PathBuf,
    /// Removed candidates CSV.
    #[arg(long)]
    removed: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Number of scans (default: distinct series ids over both files).
    #[arg(long)]
    scans: Option<usize>,
    /// Operating-point rule: step or linear.
    #[arg(long, default_value = "step")]
    interpolation: String,
    /// Directory for froc.json, froc.csv and froc_plot.dat.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON (`{"master_seed": 0}` runs the default suite).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
    /// Disable multi-slice propagation.
    #[arg(long)]
    no_msp: bool,
    /// Disable motion-guided suppression.
    #[arg(long)]
    no_mlgs: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(subcommand)]
    kind: ReportKind,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Ranked forest feature importances.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// FROC table from froc.json.
    Froc {
        #[arg(long)]
        froc: PathBuf,
    },
    /// Text summary of report.json (and timings.json when given).
    Run {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        timings: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Pipeline config JSON supplying seeds and detector settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,5")]
    gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,10,30")]
    ks: Vec<usize>,
    /// Scans in the evaluation suite.
    #[arg(long)]
    scans: Option<usize>,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(PipelineConfig::new(0)),
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let mut truths: Vec<GroundTruthNodule> = Vec::new();
    for spec in benchmark_suite(a.seed, a.scans) {
        let p = generate_phantom(&spec)?;
        write_mhd(&a.out.join(format!("{}.mhd", spec.series_id)), &p.volume)?;
        truths.extend(p.truths);
    }
    write_annotations(&a.out.join("annotations.csv"), &truths)?;
    println!("wrote {} scans with {} nodules to {}", a.scans, truths.len(), a.out.display());
    Ok(())
}

fn train_scorer_cmd(a: TrainScorerArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let scans: Vec<DescribedScan> = benchmark_suite(training_suite_seed(a.seed), a.scans)
        .iter()
        .map(|s| {
            let p = generate_phantom(s)?;
            seqcad::pipeline::run::describe_volume(&p.volume, &s.series_id, p.truths, &cfg.detector)
        })
        .collect::<Result<_>>()?;
    let (xs, ys) = scorer_dataset(&scans);
    let tcfg = ScorerTrainConfig {
        gamma: a.gamma,
        ratio_k: a.k,
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        seed: seeds::derive(a.seed, "scorer", 0),
    };
    let t = detector::train_scorer(&xs, &ys, PATCH_FEATURE_SCHEMA, &tcfg)?;
    write_json(&a.out, &t.model)?;
    println!(
        "trained on {} proposals ({} positive); final loss {:.6}",
        xs.len(),
        ys.iter().filter(|&&y| y).count(),
        t.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let model = load_scorer(&a.model)?;
    let vol = read_mhd(&a.volume)?;
    let series = a
        .series
        .or_else(|| a.volume.file_stem().and_then(|s| s.to_str()).map(String::from))
        .unwrap_or_default();
    let mut cfg = detector::DetectorConfig::default();
    if let Some(v) = a.score_thresh {
        cfg.score_thresh = v;
    }
    if let Some(v) = a.nms_iou {
        cfg.nms_iou = v;
    }
    if let Some(v) = a.response_floor {
        cfg.proposal.response_floor = v;
    }
    let [nx, ny, nz] = vol.geom.dims;
    let det = SliceDetector::new(ny, nx, &model, &cfg)?;
    let mut dets = Vec::new();
    for k in 0..nz {
        dets.extend(det.detect(&vol.slice(k), &series, k)?);
    }
    write_jsonl(&a.out, &dets)?;
    println!("{} detections over {nz} slices", dets.len());
    Ok(())
}

/// Links each series separately so tracks never mix series.
fn link_by_series(dets: &[detector::SliceDetection], link_iou: f64, max_gap: usize) -> Vec<Track> {
    let ids: BTreeSet<&str> = dets.iter().map(|d| d.series_id.as_str()).collect();
    ids.into_iter()
        .flat_map(|id| {
            let own: Vec<_> = dets.iter().filter(|d| d.series_id == id).cloned().collect();
            link_tracks(&own, link_iou, max_gap)
        })
        .collect()
}

fn link(a: LinkArgs) -> Result<()> {
    let dets: Vec<detector::SliceDetection> = read_jsonl(&a.detections)?;
    let tracks = link_by_series(&dets, a.link_iou, a.max_gap);
    write_jsonl(&a.out, &tracks)?;
    println!("{} detections linked into {} tracks", dets.len(), tracks.len());
    Ok(())
}

fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    let tracks: Vec<Track> = read_jsonl(path)?;
    for t in &tracks {
        t.validate()?;
    }
    Ok(tracks)
}

fn msp_cmd(a: MspArgs) -> Result<()> {
    let cfg = MspConfig { w: a.w, decay_alpha: a.decay, min_nodule_extent_slices: a.min_nodule_extent };
    cfg.validate()?;
    let tracks = read_tracks(&a.tracks)?;
    let out = split_at_gaps(&msp::propagate(&tracks, &cfg));
    let added: usize = out.iter().flat_map(|t| &t.members).filter(|m| m.propagated).count();
    write_jsonl(&a.out, &out)?;
    println!("{} tracks in, {} tracks out, {added} propagated members", tracks.len(), out.len());
    Ok(())
}

fn train_rf(a: TrainRfArgs) -> Result<()> {
    let tracks = read_tracks(&a.tracks)?;
    let truths = read_annotations(&a.annotations)?;
    let geom = a.geometry.geometry()?;
    let labels = label_tracks(&tracks, &geom, &truths);
    let feats: Vec<_> = tracks.iter().map(|t| extract_motion_features(t, &geom)).collect();
    if let Some(p) = &a.features_csv {
        let mut s = format!("{},label\n", MOTION_FEATURE_NAMES.join(","));
        for (f, l) in feats.iter().zip(&labels) {
            let row: Vec<String> = f.0.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{}\n", row.join(","), u8::from(*l)));
        }
        fs::write(p, s).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    let m = train_motion_forest(&feats, &labels, &ForestParams { n_trees: a.trees, mtry: a.mtry, seed: a.seed })?;
    write_json(&a.out, &m)?;
    println!(
        "forest of {} trees on {} tracks ({} positive)",
        m.n_trees,
        labels.len(),
        labels.iter().filter(|&&l| l).count()
    );
    Ok(())
}

fn suppress_cmd(a: SuppressArgs) -> Result<()> {
    let tracks = read_tracks(&a.tracks)?;
    let model = load_forest(&a.model)?;
    let geom = a.geometry.geometry()?;
    let s = suppress(&tracks, &model, a.threshold, &geom, a.score_mode)?;
    write_candidates(&a.out, &s.kept)?;
    if let Some(p) = &a.removed {
        write_candidates(p, &s.removed)?;
    }
    println!("kept {}  removed {}", s.kept.len(), s.removed.len());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cands = read_candidates(&a.candidates)?;
    let truths = read_annotations(&a.annotations)?;
    let n_scans = a.scans.unwrap_or_else(|| {
        cands
            .iter()
            .map(|c| c.series_id.as_str())
            .chain(truths.iter().map(|t| t.series_id.as_str()))
            .collect::<BTreeSet<_>>()
            .len()
    });
    let interpolation = match a.interpolation.as_str() {
        "step" => Interpolation::Step,
        "linear" => Interpolation::Linear,
        other => return Err(Error::InvalidInput(format!("unknown interpolation {other:?}"))),
    };
    let s = froc_curve(&cands, &truths, n_scans, &FrocOptions { interpolation, ..Default::default() })?;
    print!("{}", render_froc_table(&s));
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        write_froc_files(dir, &s)?;
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg: PipelineConfig = read_json(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = Some(o);
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.no_msp {
        cfg.msp.enabled = false;
    }
    if a.no_mlgs {
        cfg.mlgs.enabled = false;
    }
    let o = run_pipeline(&cfg)?;
    print!("{}", render_text(&o.report, Some(&o.timings)));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    match a.kind {
        ReportKind::Importance { model, top } => {
            let m = load_forest(&model)?;
            println!("{:<4} {:<26} {:>10}", "rank", "feature", "importance");
            for (i, (name, v)) in m.feature_importance().into_iter().take(top).enumerate() {
                println!("{:<4} {:<26} {:>10.6}", i + 1, name, v);
            }
        }
        ReportKind::Froc { froc } => {
            let s: seqcad::froc::FrocSummary = read_json(&froc)?;
            print!("{}", render_froc_table(&s));
        }
        ReportKind::Run { report, timings } => {
            let r: RunReport = read_json(&report)?;
            let t: Option<Timings> = timings.map(|p| read_json(&p)).transpose()?;
            print!("{}", render_text(&r, t.as_ref()));
        }
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let (Some(n), seqcad::pipeline::InputConfig::Suite { n_scans, .. }) = (a.scans, &mut cfg.input) {
        *n_scans = n;
    }
    let rows = sweep(&cfg, &a.gammas, &a.ks)?;
    println!(
        "{:>6} {:>4} {:>10} {:>8} {:>10} {:>12} {:>10}",
        "gamma", "k", "loss", "AP", "dets/scan", "sensitivity", "cands/scan"
    );
    for r in &rows {
        println!(
            "{:>6} {:>4} {:>10.5} {:>8.4} {:>10.2} {:>12.4} {:>10.2}",
            r.gamma, r.ratio_k, r.final_loss, r.ap_2d, r.detections_per_scan, r.candidate_sensitivity, r.candidates_per_scan
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::TrainScorer(a) => train_scorer_cmd(a),
        Command::Detect(a) => detect(a),
        Command::Link(a) => link(a),
        Command::Msp(a) => msp_cmd(a),
        Command::TrainRf(a) => train_rf(a),
        Command::Suppress(a) => suppress_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Report(a) => report(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
