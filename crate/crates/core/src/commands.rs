//! End-to-end drivers behind the `synth`, `train`, `detect` and `eval`
//! subcommands.
//!
//! The in-memory functions ([`train`], [`detect`], [`evaluate`]) hold the
//! pipeline logic; the `cmd_*` wrappers add file I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::detector::{
    background_stats, confirm_beats, heart_rate, score_instances, AceDetector, BeatDetections,
    ConfidenceSeries,
};
use crate::em::{fit, FitResult};
use crate::error::{Error, Result};
use crate::evaluation::{
    label_instances, match_beats, rate_error, roc, BeatMatch, RateErrorStats, RocCurve,
    FPR_DEFINITION,
};
use crate::io::{self, StoredModel};
use crate::model::TrainingSet;
use crate::signal::{build_bags, instances_from_recording, Recording};
use crate::synth::{generate, SyntheticRecording};

/// Shortest accepted training span in seconds.
pub const MIN_TRAINING_SECONDS: f64 = 30.0;

pub const CONFIDENCE_FILE: &str = "confidence.csv";
pub const BEATS_FILE: &str = "beats.csv";
pub const RATE_FILE: &str = "rate.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Optional `[from, to)` time slice applied to a recording before use.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Span {
    pub from: Option<f64>,
    pub to: Option<f64>,
}

impl Span {
    pub fn apply(&self, rec: Recording) -> Result<Recording> {
        if self.from.is_none() && self.to.is_none() {
            return Ok(rec);
        }
        let from = self.from.unwrap_or(rec.start_time);
        let to = self.to.unwrap_or(rec.end_time());
        rec.slice(from, to)
    }
}

/// Ground-truth path that sits next to a recording: `x.csv` → `x.gt.csv`.
pub fn default_gt_path(recording: &Path) -> PathBuf {
    let stem = recording
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "recording".into());
    recording.with_file_name(format!("{stem}.gt.csv"))
}

pub fn synthesize(cfg: &RunConfig) -> Result<SyntheticRecording> {
    let profile = cfg.synth.profile(cfg.seed)?;
    generate(&profile, cfg.synth.duration, cfg.seed)
}

/// Writes the recording and its ground truth; returns the beat count.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, gt_out: Option<&Path>) -> Result<usize> {
    let syn = synthesize(cfg)?;
    let gt_path = gt_out.map_or_else(|| default_gt_path(out), Path::to_path_buf);
    io::write_recording(out, &syn.recording)?;
    io::write_ground_truth(&gt_path, &syn.recording.gt_beats)?;
    Ok(syn.recording.gt_beats.len())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StoredModel,
    pub fit: FitResult,
    pub positive_bags: usize,
    pub negative_instances: usize,
}

/// Filter, peak-pick, bag and fit; background statistics come from the
/// negative-bag instances.
pub fn train(rec: &Recording, cfg: &RunConfig) -> Result<TrainOutcome> {
    if rec.duration() < MIN_TRAINING_SECONDS {
        return Err(Error::Data(format!(
            "training span of {:.1} s is shorter than {MIN_TRAINING_SECONDS} s",
            rec.duration()
        )));
    }
    if rec.gt_beats.is_empty() {
        return Err(Error::Data("training recording has no ground-truth beats".into()));
    }
    let exec = cfg.execution();
    let instances = instances_from_recording(rec, &cfg.pipeline, exec)?;
    let bags = build_bags(&instances, &rec.gt_beats, cfg.pipeline.per_transducer)?;
    if !bags.dropped_beats.is_empty() {
        log::warn!("{} beats had no instances and were dropped", bags.dropped_beats.len());
    }
    let positive_bags = bags.positive_count();
    let set = TrainingSet::new(bags.bags, cfg.pipeline.d)?;
    let negative_instances = set.n_neg();
    let fit = fit(&set, &cfg.em_config())?;
    let background = background_stats(set.negative_points())?;
    let model = StoredModel {
        concepts: fit.model.clone(),
        background,
        objective_trace: fit.objective_trace.clone(),
        iterations: fit.iterations,
        converged: fit.converged,
    };
    Ok(TrainOutcome {
        model,
        fit,
        positive_bags,
        negative_instances,
    })
}

pub fn cmd_train(
    recording: &Path,
    gt: Option<&Path>,
    cfg: &RunConfig,
    span: Span,
    model_out: &Path,
) -> Result<TrainOutcome> {
    let gt_path = gt.map_or_else(|| default_gt_path(recording), Path::to_path_buf);
    let rec = span.apply(io::read_recording(recording, Some(&gt_path))?)?;
    let outcome = train(&rec, cfg)?;
    io::write_model(model_out, &outcome.model)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub confidence: ConfidenceSeries,
    pub beats: BeatDetections,
    pub rate: Vec<(f64, f64)>,
}

pub fn detect(rec: &Recording, model: &StoredModel, cfg: &RunConfig) -> Result<DetectOutcome> {
    if model.concepts.dim() != cfg.pipeline.d {
        return Err(Error::DimensionMismatch {
            what: "model dimension vs instance length",
            index: 0,
            expected: cfg.pipeline.d,
            got: model.concepts.dim(),
        });
    }
    let exec = cfg.execution();
    let instances = instances_from_recording(rec, &cfg.pipeline, exec)?;
    let detector = AceDetector::new(&model.concepts.target, &model.background)?;
    let confidence = score_instances(&instances, &detector, exec)?;
    let beats = confirm_beats(&confidence, &cfg.detector);
    let ev = &cfg.evaluation;
    let rate = heart_rate(&beats, rec.start_time, rec.end_time(), ev.rate_window, ev.rate_step)?;
    Ok(DetectOutcome {
        confidence,
        beats,
        rate,
    })
}

/// Writes `confidence.csv`, `beats.csv` and `rate.csv` into `out_dir`.
pub fn cmd_detect(
    recording: &Path,
    model: &Path,
    cfg: &RunConfig,
    span: Span,
    out_dir: &Path,
) -> Result<DetectOutcome> {
    let rec = span.apply(io::read_recording(recording, None)?)?;
    let model = io::read_model(model)?;
    let outcome = detect(&rec, &model, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_confidence(&out_dir.join(CONFIDENCE_FILE), &outcome.confidence)?;
    io::write_beats(&out_dir.join(BEATS_FILE), &outcome.beats)?;
    io::write_rate(&out_dir.join(RATE_FILE), &outcome.rate)?;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub roc: RocCurve,
    pub rate: RateErrorStats,
    pub beats: BeatMatch,
    pub instances: usize,
    pub positive_instances: usize,
    pub minutes: f64,
    pub source: String,
}

impl EvalOutcome {
    pub fn false_per_minute(&self) -> f64 {
        self.beats.false_detections as f64 / self.minutes
    }

    /// Plain-text summary with a "Mean Error (beat/min)" table.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let r = &self.rate;
        writeln!(s, "Mean Error (beat/min)").unwrap();
        writeln!(s, "{:<24} {:>8} {:>16}", "Recording", "Windows", "Error").unwrap();
        let err = format!("{:.2}±{:.2}", r.mean_abs_error, r.std_dev);
        writeln!(s, "{:<24} {:>8} {:>16}", self.source, r.n_windows, err).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "ROC AUC: {:.4}", self.roc.auc).unwrap();
        writeln!(
            s,
            "Instances: {} ({} labelled heartbeat)",
            self.instances, self.positive_instances
        )
        .unwrap();
        writeln!(s, "FPR definition: {FPR_DEFINITION}").unwrap();
        writeln!(
            s,
            "Confirmed beats: {}/{} true beats matched ({:.2}%), {} false ({:.2}/min)",
            self.beats.matched,
            self.beats.true_beats,
            100.0 * self.beats.sensitivity(),
            self.beats.false_detections,
            self.false_per_minute()
        )
        .unwrap();
        s
    }
}

/// Scores detector outputs against the ground truth of `rec`.
pub fn evaluate(rec: &Recording, det: &DetectOutcome, cfg: &RunConfig) -> Result<EvalOutcome> {
    if rec.gt_beats.is_empty() {
        return Err(Error::Data("evaluation needs ground-truth beats".into()));
    }
    let ev = &cfg.evaluation;
    let (times, scores): (Vec<f64>, Vec<f64>) =
        det.confidence.channels.iter().flatten().copied().unzip();
    let labels = label_instances(&times, &rec.gt_beats, ev.halo);
    let curve = roc(&scores, &labels)?;
    let reference = heart_rate(
        &BeatDetections {
            times: rec.gt_beats.clone(),
        },
        rec.start_time,
        rec.end_time(),
        ev.rate_window,
        ev.rate_step,
    )?;
    let rate = rate_error(&det.rate, &reference)?;
    let beats = match_beats(&det.beats.times, &rec.gt_beats, ev.match_tolerance);
    Ok(EvalOutcome {
        roc: curve,
        rate,
        beats,
        instances: labels.len(),
        positive_instances: labels.iter().filter(|&&l| l).count(),
        minutes: rec.duration() / 60.0,
        source: rec.source_id.clone(),
    })
}

/// Reads a `detect` output directory, writes `roc.csv` and `report.txt`.
pub fn cmd_eval(
    detections: &Path,
    recording: &Path,
    gt: Option<&Path>,
    cfg: &RunConfig,
    span: Span,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let gt_path = gt.map_or_else(|| default_gt_path(recording), Path::to_path_buf);
    if !gt_path.exists() {
        return Err(Error::Data(format!(
            "ground truth {} not found",
            gt_path.display()
        )));
    }
    let rec = span.apply(io::read_recording(recording, Some(&gt_path))?)?;
    let det = DetectOutcome {
        confidence: io::read_confidence(&detections.join(CONFIDENCE_FILE))?,
        beats: io::read_beats(&detections.join(BEATS_FILE))?,
        rate: io::read_rate(&detections.join(RATE_FILE))?,
    };
    let outcome = evaluate(&rec, &det, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_roc(&out_dir.join(ROC_FILE), &outcome.roc)?;
    let report = outcome.report();
    fs::write(out_dir.join(REPORT_FILE), &report).map_err(|e| Error::io(out_dir, e))?;
    Ok(outcome)
}
