//! From raw transducer recordings to labelled training bags.
//!
//! Every channel is band-passed, every local maximum of the filtered channel
//! becomes the centre of one fixed-length instance, and instances are
//! grouped into one positive bag per ground-truth beat plus a single
//! negative bag holding everything else.

pub mod filter;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

pub use filter::{bandpass, BandPass};

use crate::error::{Error, Result};
use crate::model::{Bag, Instance, CHANNELS, DEFAULT_INSTANCE_LEN};
use crate::parallel::{map_indexed, Execution};

pub const DEFAULT_SAMPLE_RATE: f64 = 100.0;

/// Four equal-length transducer channels plus ground-truth beat times.
///
/// Sample `i` of every channel is taken at `start_time + i / sample_rate`
/// seconds; beat times use the same clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate: f64,
    pub start_time: f64,
    pub channels: Vec<Vec<f64>>,
    pub gt_beats: Vec<f64>,
    pub source_id: String,
}

impl Recording {
    pub fn new(
        sample_rate: f64,
        start_time: f64,
        channels: Vec<Vec<f64>>,
        gt_beats: Vec<f64>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::Data(format!("sample rate {sample_rate} must be positive")));
        }
        if channels.len() != CHANNELS {
            return Err(Error::Data(format!(
                "expected {CHANNELS} channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if let Some(c) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::DimensionMismatch {
                what: "channel length",
                index: c,
                expected: len,
                got: channels[c].len(),
            });
        }
        let rec = Self {
            sample_rate,
            start_time,
            channels,
            gt_beats,
            source_id: source_id.into(),
        };
        if rec.gt_beats.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("ground-truth beats must be strictly increasing".into()));
        }
        if rec
            .gt_beats
            .iter()
            .any(|&t| t < rec.start_time || t > rec.end_time())
        {
            return Err(Error::Data("ground-truth beat outside the recording".into()));
        }
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.sample_rate
    }

    /// Samples with times in `[from, to)`, keeping absolute times. Beats in
    /// the same interval are kept.
    pub fn slice(&self, from: f64, to: f64) -> Result<Self> {
        let index = |t: f64| {
            (((t - self.start_time) * self.sample_rate).round().max(0.0) as usize).min(self.len())
        };
        let (a, b) = (index(from), index(to));
        if a >= b {
            return Err(Error::Data(format!("empty time slice [{from}, {to})")));
        }
        let start_time = self.time_of(a);
        let end_time = self.time_of(b);
        Self::new(
            self.sample_rate,
            start_time,
            self.channels.iter().map(|c| c[a..b].to_vec()).collect(),
            self.gt_beats
                .iter()
                .copied()
                .filter(|&t| t >= start_time && t < end_time)
                .collect(),
            self.source_id.clone(),
        )
    }
}

/// Front-end parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Instance length in samples; must be odd.
    pub d: usize,
    pub per_transducer: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d: DEFAULT_INSTANCE_LEN,
            per_transducer: 3,
            low_hz: filter::DEFAULT_LOW_HZ,
            high_hz: filter::DEFAULT_HIGH_HZ,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d.is_multiple_of(2) || self.d < 3 {
            return Err(Error::Config(format!("instance length {} must be odd and ≥ 3", self.d)));
        }
        if self.per_transducer == 0 {
            return Err(Error::Config("per_transducer must be at least 1".into()));
        }
        Ok(())
    }
}

/// Local maxima per channel as `(sample index, time)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakList {
    pub channels: Vec<Vec<(usize, f64)>>,
}

impl PeakList {
    pub fn total(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }
}

/// Every sample `m` with `f[m−1] < f[m] ≥ f[m+1]`.
pub fn detect_peaks(filtered: &[f64]) -> Vec<usize> {
    if filtered.len() < 3 {
        return Vec::new();
    }
    (1..filtered.len() - 1)
        .filter(|&m| filtered[m - 1] < filtered[m] && filtered[m] >= filtered[m + 1])
        .collect()
}

/// Band-passes every channel of `rec`.
pub fn filter_recording(rec: &Recording, cfg: &PipelineConfig, exec: Execution) -> Result<Recording> {
    let bp = BandPass::design(cfg.low_hz, cfg.high_hz, rec.sample_rate)?;
    let channels = map_indexed(exec, rec.channels.len(), |c| bp.apply(&rec.channels[c]));
    Ok(Recording {
        channels,
        ..rec.clone()
    })
}

pub fn find_peaks(filtered: &Recording) -> PeakList {
    PeakList {
        channels: filtered
            .channels
            .iter()
            .map(|c| {
                detect_peaks(c)
                    .into_iter()
                    .map(|m| (m, filtered.time_of(m)))
                    .collect()
            })
            .collect(),
    }
}

/// Windows of length `d` centred on each peak; peaks too close to either
/// end of the recording are skipped. Output is ordered by channel, then time.
pub fn extract_instances(recording: &Recording, peaks: &PeakList, d: usize) -> Result<Vec<Instance>> {
    if d.is_multiple_of(2) {
        return Err(Error::Config(format!("instance length {d} must be odd")));
    }
    let half = (d - 1) / 2;
    let len = recording.len();
    let mut out = Vec::new();
    for (channel, list) in peaks.channels.iter().enumerate() {
        let signal = &recording.channels[channel];
        for &(m, t) in list {
            if m < half || m + half >= len {
                continue;
            }
            out.push(Instance::new(
                signal[m - half..=m + half].to_vec(),
                channel,
                t,
                recording.source_id.clone(),
            )?);
        }
    }
    Ok(out)
}

/// Filter, peak-pick and window a raw recording.
pub fn instances_from_recording(
    rec: &Recording,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let filtered = filter_recording(rec, cfg, exec)?;
    let peaks = find_peaks(&filtered);
    extract_instances(&filtered, &peaks, cfg.d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    distance: f64,
    beat: usize,
    instance: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.beat.cmp(&other.beat))
            .then(self.instance.cmp(&other.instance))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Walks outward from a beat through time-sorted instances, nearest first
/// (the earlier instance on ties).
struct Cursor {
    left: isize,
    right: usize,
}

impl Cursor {
    fn next(&mut self, times: &[f64], beat: f64) -> Option<usize> {
        let l = (self.left >= 0).then_some(self.left as usize);
        let r = (self.right < times.len()).then_some(self.right);
        let pick = match (l, r) {
            (Some(l), Some(r)) => {
                if (beat - times[l]) <= (times[r] - beat) {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return None,
        };
        if Some(pick) == l {
            self.left -= 1;
        } else {
            self.right += 1;
        }
        Some(pick)
    }
}

/// Assigns to each beat up to `k` of the time-sorted instances `times`,
/// globally nearest pair first; ties go to the earlier beat.
fn assign_nearest(times: &[f64], beats: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut owner = vec![false; times.len()];
    let mut chosen = vec![Vec::new(); beats.len()];
    let mut cursors: Vec<Cursor> = beats
        .iter()
        .map(|&b| {
            let right = times.partition_point(|&t| t < b);
            Cursor {
                left: right as isize - 1,
                right,
            }
        })
        .collect();
    let mut heap = BinaryHeap::new();
    for (beat, &b) in beats.iter().enumerate() {
        if let Some(instance) = cursors[beat].next(times, b) {
            heap.push(Reverse(Candidate {
                distance: (times[instance] - b).abs(),
                beat,
                instance,
            }));
        }
    }
    while let Some(Reverse(c)) = heap.pop() {
        if !owner[c.instance] {
            owner[c.instance] = true;
            chosen[c.beat].push(c.instance);
        }
        if chosen[c.beat].len() < k {
            if let Some(instance) = cursors[c.beat].next(times, beats[c.beat]) {
                heap.push(Reverse(Candidate {
                    distance: (times[instance] - beats[c.beat]).abs(),
                    beat: c.beat,
                    instance,
                }));
            }
        }
    }
    chosen
}

/// Outcome of bag construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BagSet {
    /// Positive bags in beat order, followed by the negative bag if any.
    pub bags: Vec<Bag>,
    /// Beats (by index) whose bag ended up empty and was dropped.
    pub dropped_beats: Vec<usize>,
}

impl BagSet {
    pub fn positive_count(&self) -> usize {
        self.bags.iter().filter(|b| b.is_positive()).count()
    }

    pub fn negative(&self) -> Option<&Bag> {
        self.bags.iter().find(|b| !b.is_positive())
    }
}

/// One positive bag per ground-truth beat holding, on every channel, the
/// `per_transducer` instances nearest in time to the beat. Each instance
/// joins at most one positive bag (nearest beat wins, then the earlier
/// beat); all remaining instances form a single negative bag.
pub fn build_bags(instances: &[Instance], gt_beats: &[f64], per_transducer: usize) -> Result<BagSet> {
    if per_transducer == 0 {
        return Err(Error::Config("per_transducer must be at least 1".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); gt_beats.len()];
    let mut used = vec![false; instances.len()];
    for channel in 0..CHANNELS {
        let mut idx: Vec<usize> = (0..instances.len())
            .filter(|&i| instances[i].channel == channel)
            .collect();
        idx.sort_by(|&a, &b| {
            instances[a]
                .peak_time
                .total_cmp(&instances[b].peak_time)
                .then(a.cmp(&b))
        });
        let times: Vec<f64> = idx.iter().map(|&i| instances[i].peak_time).collect();
        for (beat, picks) in assign_nearest(&times, gt_beats, per_transducer).into_iter().enumerate() {
            let mut picks: Vec<usize> = picks.into_iter().map(|j| idx[j]).collect();
            picks.sort_by(|&a, &b| instances[a].peak_time.total_cmp(&instances[b].peak_time));
            for &i in &picks {
                used[i] = true;
            }
            members[beat].extend(picks);
        }
    }

    let mut bags = Vec::new();
    let mut dropped_beats = Vec::new();
    for (beat, m) in members.into_iter().enumerate() {
        if m.is_empty() {
            log::warn!("beat {beat} at {:.3} s has no nearby instances; bag dropped", gt_beats[beat]);
            dropped_beats.push(beat);
            continue;
        }
        let id = bags.len();
        bags.push(Bag::new(m.into_iter().map(|i| instances[i].clone()).collect(), true, id)?);
    }
    let rest: Vec<Instance> = instances
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(x, _)| x.clone())
        .collect();
    if rest.is_empty() {
        log::warn!("every instance landed in a positive bag; the negative bag is empty");
    } else {
        let id = bags.len();
        bags.push(Bag::new(rest, false, id)?);
    }
    Ok(BagSet {
        bags,
        dropped_beats,
    })
}
