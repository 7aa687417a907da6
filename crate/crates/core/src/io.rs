//! File formats: recording and ground-truth CSVs, the text model file, and
//! the detection/evaluation CSV outputs.
//!
//! All floating-point output is deterministic. CSVs use the shortest
//! representation that reads back to the same `f64`; the model file uses
//! 17 significant digits in scientific notation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::detector::{BackgroundStats, BeatDetections, ConfidenceSeries};
use crate::error::{Error, Result};
use crate::evaluation::RocCurve;
use crate::model::{ConceptModel, CHANNELS};
use crate::signal::Recording;

pub const RECORDING_HEADER: [&str; 5] = ["time", "ch0", "ch1", "ch2", "ch3"];
pub const MODEL_FORMAT: &str = "efumi-bcg-model";
pub const MODEL_VERSION: u32 = 1;

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::Data(format!("{}: line {line}: '{field}' is not a number", path.display()))
    })?;
    if v.is_nan() {
        return Err(Error::NonFinite(format!("{}: line {line}", path.display())));
    }
    Ok(v)
}

pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RECORDING_HEADER).map_err(|e| Error::csv(path, e))?;
    for i in 0..rec.len() {
        let mut row = vec![rec.time_of(i).to_string()];
        row.extend(rec.channels.iter().map(|c| c[i].to_string()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ground_truth(path: &Path, beats: &[f64]) -> Result<()> {
    write_column(path, "beat_time", beats)
}

fn write_column(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([header]).map_err(|e| Error::csv(path, e))?;
    for v in values {
        w.write_record([v.to_string()]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 1 {
            return Err(Error::Data(format!(
                "{}: line {}: expected one column",
                path.display(),
                line + 2
            )));
        }
        out.push(parse_f64(path, line + 2, &rec[0])?);
    }
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<f64>> {
    read_column(path)
}

/// Reads a recording CSV. The sample rate is recovered from the uniform
/// time column; `gt_path` optionally attaches ground-truth beats.
pub fn read_recording(path: &Path, gt_path: Option<&Path>) -> Result<Recording> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?;
    if header.iter().map(str::trim).ne(RECORDING_HEADER) {
        return Err(Error::Data(format!(
            "{}: header must be {}",
            path.display(),
            RECORDING_HEADER.join(",")
        )));
    }
    let mut times = Vec::new();
    let mut channels = vec![Vec::new(); CHANNELS];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        times.push(parse_f64(path, line + 2, &rec[0])?);
        for (c, ch) in channels.iter_mut().enumerate() {
            ch.push(parse_f64(path, line + 2, &rec[c + 1])?);
        }
    }
    if times.len() < 2 {
        return Err(Error::Data(format!("{}: fewer than two samples", path.display())));
    }
    let span = times[times.len() - 1] - times[0];
    let mut fs = (times.len() - 1) as f64 / span;
    if (fs - fs.round()).abs() < 1e-6 {
        fs = fs.round();
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::Data(format!("{}: time column is not increasing", path.display())));
    }
    if let Some(i) = times
        .iter()
        .enumerate()
        .position(|(i, &t)| (t - (times[0] + i as f64 / fs)).abs() > 1e-6)
    {
        return Err(Error::Data(format!(
            "{}: non-uniform sampling at row {}",
            path.display(),
            i + 2
        )));
    }
    let gt = match gt_path {
        Some(p) => read_ground_truth(p)?,
        None => Vec::new(),
    };
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Recording::new(fs, times[0], channels, gt, source)
}

/// Everything `train` produces and `detect` consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub concepts: ConceptModel,
    pub background: BackgroundStats,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn push_vector(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        write!(out, " {v:.16e}").expect("writing to a String cannot fail");
    }
    out.push('\n');
}

/// Serializes the model; equal models always render to equal bytes.
pub fn model_to_string(m: &StoredModel) -> String {
    let d = m.concepts.dim();
    let mut out = String::new();
    writeln!(out, "format {MODEL_FORMAT}").unwrap();
    writeln!(out, "version {MODEL_VERSION}").unwrap();
    writeln!(out, "dim {d}").unwrap();
    writeln!(out, "background_concepts {}", m.concepts.n_background()).unwrap();
    writeln!(out, "iterations {}", m.iterations).unwrap();
    writeln!(out, "converged {}", m.converged).unwrap();
    push_vector(&mut out, "target", &m.concepts.target);
    for (k, b) in m.concepts.background.iter().enumerate() {
        push_vector(&mut out, &format!("background {k}"), b);
    }
    push_vector(&mut out, "bg_mean", &m.background.mean);
    for r in 0..d {
        let row: Vec<f64> = m.background.covariance.row(r).iter().copied().collect();
        push_vector(&mut out, &format!("bg_cov {r}"), &row);
    }
    writeln!(out, "objective_trace {}", m.objective_trace.len()).unwrap();
    push_vector(&mut out, "objective", &m.objective_trace);
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_key(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let (no, line) = self
            .inner
            .next()
            .ok_or_else(|| Error::Data(format!("model file ends before '{key}'")))?;
        let mut parts = line.split_ascii_whitespace();
        let mut found = Vec::new();
        for k in key.split(' ') {
            found.push(parts.next().unwrap_or(""));
            if found.last() != Some(&k) {
                return Err(Error::Data(format!(
                    "model file line {}: expected '{key}', found '{line}'",
                    no + 1
                )));
            }
        }
        Ok(parts.collect())
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let vals = self.next_key(key)?;
        match vals.as_slice() {
            [v] => v
                .parse()
                .map_err(|_| Error::Data(format!("model file: bad value for '{key}'"))),
            _ => Err(Error::Data(format!("model file: '{key}' takes one value"))),
        }
    }

    fn vector(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let vals = self.next_key(key)?;
        if vals.len() != len {
            return Err(Error::Data(format!(
                "model file: '{key}' has {} values, expected {len}",
                vals.len()
            )));
        }
        vals.iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Data(format!("model file: bad number '{v}' in '{key}'")))
            })
            .collect()
    }
}

pub fn model_from_str(text: &str) -> Result<StoredModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let format: String = lines.scalar("format")?;
    if format != MODEL_FORMAT {
        return Err(Error::Data(format!("not a model file (format '{format}')")));
    }
    let version: u32 = lines.scalar("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Data(format!("unsupported model version {version}")));
    }
    let d: usize = lines.scalar("dim")?;
    let m: usize = lines.scalar("background_concepts")?;
    let iterations = lines.scalar("iterations")?;
    let converged = lines.scalar("converged")?;
    let target = lines.vector("target", d)?;
    let background = (0..m)
        .map(|k| lines.vector(&format!("background {k}"), d))
        .collect::<Result<Vec<_>>>()?;
    let mean = lines.vector("bg_mean", d)?;
    let mut cov = Vec::with_capacity(d * d);
    for r in 0..d {
        cov.extend(lines.vector(&format!("bg_cov {r}"), d)?);
    }
    let n_obj: usize = lines.scalar("objective_trace")?;
    let objective_trace = lines.vector("objective", n_obj)?;
    if lines.inner.any(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Data("model file has trailing content".into()));
    }
    Ok(StoredModel {
        concepts: ConceptModel::new(target, background)?,
        background: BackgroundStats {
            mean,
            covariance: DMatrix::from_row_slice(d, d, &cov),
        },
        objective_trace,
        iterations,
        converged,
    })
}

pub fn write_model(path: &Path, m: &StoredModel) -> Result<()> {
    fs::write(path, model_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<StoredModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

pub fn write_confidence(path: &Path, series: &ConfidenceSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["channel", "time", "confidence"])
        .map_err(|e| Error::csv(path, e))?;
    for (c, list) in series.channels.iter().enumerate() {
        for &(t, s) in list {
            w.write_record([c.to_string(), t.to_string(), s.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_confidence(path: &Path) -> Result<ConfidenceSeries> {
    let mut r = csv_reader(path)?;
    let mut channels = vec![Vec::new(); CHANNELS];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let c: usize = rec[0]
            .trim()
            .parse()
            .ok()
            .filter(|&c| c < CHANNELS)
            .ok_or_else(|| {
                Error::Data(format!("{}: line {}: bad channel", path.display(), line + 2))
            })?;
        channels[c].push((
            parse_f64(path, line + 2, &rec[1])?,
            parse_f64(path, line + 2, &rec[2])?,
        ));
    }
    ConfidenceSeries::new(channels)
}

pub fn write_beats(path: &Path, beats: &BeatDetections) -> Result<()> {
    write_column(path, "beat_time", &beats.times)
}

pub fn read_beats(path: &Path) -> Result<BeatDetections> {
    Ok(BeatDetections {
        times: read_column(path)?,
    })
}

pub fn write_rate(path: &Path, rate: &[(f64, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["window_end", "bpm"])
        .map_err(|e| Error::csv(path, e))?;
    for &(t, r) in rate {
        w.write_record([t.to_string(), r.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rate(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!(
                "{}: line {}: expected two columns",
                path.display(),
                line + 2
            )));
        }
        out.push((
            parse_f64(path, line + 2, &rec[0])?,
            parse_f64(path, line + 2, &rec[1])?,
        ));
    }
    Ok(out)
}

pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["threshold", "fpr", "tpr"])
        .map_err(|e| Error::csv(path, e))?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
