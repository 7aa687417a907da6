//! ACE scoring against the learned heartbeat concept, cross-transducer
//! vote confirmation and sliding-window heart rate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, CHANNELS};
use crate::parallel::{map_indexed, Execution};

const RIDGE_FACTOR: f64 = 1e-6;
const RIDGE_FLOOR: f64 = 1e-12;
pub const REFRACTORY_SECONDS: f64 = 0.25;

/// Mean and ridge-regularized covariance of background (negative) instances.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStats {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl BackgroundStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and covariance (`n − 1` normalization) with a ridge of
/// `1e-6 · trace/d` added to the diagonal.
pub fn background_stats<'a, I>(negatives: I) -> Result<BackgroundStats>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let points: Vec<&[f64]> = negatives.into_iter().collect();
    let Some(first) = points.first() else {
        return Err(Error::Data("background statistics need at least one instance".into()));
    };
    let d = first.len();
    let n = points.len();
    let mut mean = vec![0.0; d];
    for x in &points {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                what: "background instance",
                index: 0,
                expected: d,
                got: x.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = DVector::<f64>::zeros(d);
    for x in &points {
        for j in 0..d {
            centred[j] = x[j] - mean[j];
        }
        cov.syger(1.0, &centred, &centred, 1.0);
    }
    // syger only fills the lower triangle.
    cov.fill_upper_triangle_with_lower_triangle();
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    let ridge = (RIDGE_FACTOR * cov.trace() / d as f64).max(RIDGE_FLOOR);
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    Ok(BackgroundStats {
        mean,
        covariance: cov,
    })
}

/// Adaptive coherence estimator for one target signature.
///
/// With `x̂ = Σ^{-1/2}(x − μ)` and `ŝ = Σ^{-1/2}(s − μ)` the score is
/// `(ŝᵀx̂)² / (‖ŝ‖²‖x̂‖²)`, the squared whitened cosine. Whitening uses the
/// Cholesky factor, which gives the same inner products as `Σ^{-1/2}`.
#[derive(Debug, Clone)]
pub struct AceDetector {
    mean: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    target_white: DVector<f64>,
    target_norm_sq: f64,
}

impl AceDetector {
    pub fn new(target: &[f64], stats: &BackgroundStats) -> Result<Self> {
        let d = stats.dim();
        if target.len() != d {
            return Err(Error::DimensionMismatch {
                what: "target concept",
                index: 0,
                expected: d,
                got: target.len(),
            });
        }
        let chol = Cholesky::new(stats.covariance.clone())
            .ok_or_else(|| Error::Numerical("background covariance is not positive definite".into()))?;
        let s = DVector::from_iterator(d, target.iter().zip(&stats.mean).map(|(t, m)| t - m));
        let target_white = chol.l().solve_lower_triangular(&s).expect("Cholesky factor is invertible");
        let target_norm_sq = target_white.norm_squared();
        Ok(Self {
            mean: stats.mean.clone(),
            chol,
            target_white,
            target_norm_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "instance",
                index: 0,
                expected: self.dim(),
                got: x.len(),
            });
        }
        let v = DVector::from_iterator(self.dim(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let xw = self.chol.l().solve_lower_triangular(&v).expect("Cholesky factor is invertible");
        let xx = xw.norm_squared();
        if xx == 0.0 || self.target_norm_sq == 0.0 {
            return Ok(0.0);
        }
        let sx = self.target_white.dot(&xw);
        Ok((sx * sx / (self.target_norm_sq * xx)).clamp(0.0, 1.0))
    }
}

/// One-shot ACE score; prefer [`AceDetector`] when scoring many instances.
pub fn ace_score(instance: &Instance, target: &[f64], stats: &BackgroundStats) -> Result<f64> {
    AceDetector::new(target, stats)?.score(&instance.samples)
}

/// Per-channel `(peak time, confidence)` pairs, sorted by time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfidenceSeries {
    pub channels: Vec<Vec<(f64, f64)>>,
}

impl ConfidenceSeries {
    pub fn new(mut channels: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        for ch in &mut channels {
            if ch.iter().any(|&(_, c)| !(0.0..=1.0).contains(&c)) {
                return Err(Error::Data("confidence outside [0, 1]".into()));
            }
            ch.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(Self { channels })
    }
}

/// Scores every instance and groups the results by channel.
pub fn score_instances(
    instances: &[Instance],
    detector: &AceDetector,
    exec: Execution,
) -> Result<ConfidenceSeries> {
    let scores = map_indexed(exec, instances.len(), |i| detector.score(&instances[i].samples));
    let mut channels = vec![Vec::new(); CHANNELS];
    for (inst, s) in instances.iter().zip(scores) {
        channels[inst.channel].push((inst.peak_time, s?));
    }
    ConfidenceSeries::new(channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub threshold: f64,
    /// Half-width of the voting neighbourhood in seconds.
    pub window: f64,
    pub min_votes: usize,
    pub refractory: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.28,
            window: 0.03,
            min_votes: 2,
            refractory: REFRACTORY_SECONDS,
        }
    }
}

/// Confirmed beat times, strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatDetections {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Vote {
    time: f64,
    confidence: f64,
    channel: usize,
}

/// Greedy left-to-right vote clustering.
///
/// Super-threshold scores are visited in time order. The earliest unused
/// score anchors a cluster of all unused scores within `window` seconds
/// after it (so members are pairwise within `window`). If the cluster spans
/// at least `min_votes` distinct channels it yields a beat at the
/// confidence-weighted mean time and all members are consumed; otherwise
/// only the anchor is consumed. Beats closer than `refractory` seconds to
/// the previous confirmed beat are discarded.
pub fn confirm_beats(series: &ConfidenceSeries, cfg: &DetectorConfig) -> BeatDetections {
    let mut votes: Vec<Vote> = series
        .channels
        .iter()
        .enumerate()
        .flat_map(|(channel, list)| {
            list.iter()
                .filter(|&&(_, c)| c > cfg.threshold)
                .map(move |&(time, confidence)| Vote {
                    time,
                    confidence,
                    channel,
                })
        })
        .collect();
    // Channel index only breaks exact (time, confidence) ties, which do not
    // affect the result.
    votes.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.confidence.total_cmp(&b.confidence))
            .then(a.channel.cmp(&b.channel))
    });

    let mut used = vec![false; votes.len()];
    let mut times: Vec<f64> = Vec::new();
    for a in 0..votes.len() {
        if used[a] {
            continue;
        }
        let anchor = votes[a].time;
        let members: Vec<usize> = (a..votes.len())
            .take_while(|&j| votes[j].time - anchor <= cfg.window)
            .filter(|&j| !used[j])
            .collect();
        let mut channels = [false; CHANNELS];
        for &j in &members {
            channels[votes[j].channel] = true;
        }
        if channels.iter().filter(|&&c| c).count() < cfg.min_votes {
            used[a] = true;
            continue;
        }
        let (mut wsum, mut tsum) = (0.0, 0.0);
        for &j in &members {
            used[j] = true;
            wsum += votes[j].confidence;
            tsum += votes[j].confidence * votes[j].time;
        }
        let beat = tsum / wsum;
        if times.last().is_none_or(|&last| beat - last >= cfg.refractory) {
            times.push(beat);
        }
    }
    BeatDetections { times }
}

/// Sliding-window heart rate over `[start, end]`.
///
/// Windows of `window` seconds advance by `step`; each reports
/// `count · 60 / window` at its end time, counting beats in
/// `[end − window, end)`. A span shorter than one window yields a single
/// whole-span estimate.
pub fn heart_rate(
    detections: &BeatDetections,
    start: f64,
    end: f64,
    window: f64,
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(window > 0.0 && step > 0.0) {
        return Err(Error::Config("rate window and step must be positive".into()));
    }
    if !(end > start) {
        return Err(Error::Data(format!("empty rate span [{start}, {end}]")));
    }
    let count = |a: f64, b: f64| {
        let lo = detections.times.partition_point(|&t| t < a);
        let hi = detections.times.partition_point(|&t| t < b);
        hi - lo
    };
    if end - start < window {
        log::warn!(
            "span of {:.1} s is shorter than the {window} s rate window; using one estimate",
            end - start
        );
        let n = count(start, end + f64::EPSILON * end.abs().max(1.0));
        return Ok(vec![(end, n as f64 * 60.0 / (end - start))]);
    }
    let mut out = Vec::new();
    let mut j = 0usize;
    loop {
        let stop = start + window + j as f64 * step;
        if stop > end + 1e-9 {
            break;
        }
        let n = count(stop - window, stop);
        out.push((stop, n as f64 * 60.0 / window));
        j += 1;
    }
    Ok(out)
}
