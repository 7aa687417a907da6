//! Seeded synthetic four-transducer BCG recordings with ground truth.
//!
//! A subject is a heartbeat waveform built from three Gaussian-derivative
//! lobes (a dominant J-peak flanked by H/I and K/L complexes), a jittered RR
//! process, respiration, per-transducer gains and small delays, an optional
//! failed transducer, and a finger-sensor ground truth that lags the true
//! beats with its own jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{CHANNELS, DEFAULT_INSTANCE_LEN};
use crate::signal::{Recording, DEFAULT_SAMPLE_RATE};

const MIN_RR: f64 = 0.3;
const DROPOUT_GAIN: f64 = 0.05;
const MAX_GT_JITTER: f64 = 0.1;
/// Lobes are evaluated within this many seconds of the beat.
const SUPPORT: f64 = 0.45;

/// One Gaussian-derivative lobe: derivative `order` (0, 1 or 2) of a
/// Gaussian centred at `center` seconds with scale `width`, normalized so
/// its largest excursion is `|amplitude|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lobe {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
    pub order: u8,
}

impl Lobe {
    pub fn value(&self, t: f64) -> f64 {
        let tau = (t - self.center) / self.width;
        let g = (-0.5 * tau * tau).exp();
        let shape = match self.order {
            0 => g,
            1 => -tau * g * 0.5f64.exp(),
            _ => (1.0 - tau * tau) * g,
        };
        self.amplitude * shape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub lobes: Vec<Lobe>,
    /// The waveform sampled at `sample_rate` over `template_len` samples
    /// with the J-peak at the centre sample.
    pub template: Vec<f64>,
    pub sample_rate: f64,
    pub mean_rr: f64,
    pub rr_jitter: f64,
    pub resp_freq: f64,
    pub resp_amp: f64,
    pub gt_lag: f64,
    pub gt_jitter: f64,
    pub channel_gains: [f64; CHANNELS],
    pub channel_delays: [f64; CHANNELS],
    pub dropout_channel: Option<usize>,
    pub noise_sigma: f64,
}

impl SubjectProfile {
    /// Continuous heartbeat waveform, J-peak at `t = 0`.
    pub fn waveform(&self, t: f64) -> f64 {
        self.lobes.iter().map(|l| l.value(t)).sum()
    }

    fn sample_template(lobes: &[Lobe], len: usize, sample_rate: f64) -> Vec<f64> {
        let half = (len / 2) as f64;
        (0..len)
            .map(|i| {
                let t = (i as f64 - half) / sample_rate;
                lobes.iter().map(|l| l.value(t)).sum()
            })
            .collect()
    }

    /// Recomputes `template` after the lobes or sample rate change.
    pub fn refresh_template(&mut self) {
        self.template = Self::sample_template(&self.lobes, self.template.len(), self.sample_rate);
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.5).contains(&self.mean_rr) {
            return Err(Error::Config(format!("mean_rr {} outside [0.5, 1.5] s", self.mean_rr)));
        }
        if !(self.noise_sigma >= 0.0 && self.rr_jitter >= 0.0 && self.gt_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter scales must be non-negative".into()));
        }
        if self.dropout_channel.is_some_and(|c| c >= CHANNELS) {
            return Err(Error::Config("dropout channel out of range".into()));
        }
        if !j_peak_is_global_max(&self.template) {
            return Err(Error::Config("template J-peak is not its strict global maximum".into()));
        }
        Ok(())
    }
}

fn j_peak_is_global_max(template: &[f64]) -> bool {
    let mid = template.len() / 2;
    template
        .iter()
        .enumerate()
        .all(|(i, &v)| i == mid || v < template[mid])
}

/// Deterministic subject from `seed`.
pub fn make_profile(seed: u64) -> SubjectProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = Lobe {
        center: 0.0,
        width: rng.random_range(0.030..0.042),
        amplitude: 1.0,
        order: 2,
    };
    let mut h = Lobe {
        center: rng.random_range(-0.16..-0.12),
        width: rng.random_range(0.028..0.040),
        amplitude: rng.random_range(0.15..0.30),
        order: 1,
    };
    let mut l = Lobe {
        center: rng.random_range(0.13..0.18),
        width: rng.random_range(0.035..0.050),
        amplitude: -rng.random_range(0.15..0.30),
        order: 1,
    };
    let sample_rate = DEFAULT_SAMPLE_RATE;
    let mut template;
    loop {
        template = SubjectProfile::sample_template(&[j, h, l], DEFAULT_INSTANCE_LEN, sample_rate);
        if j_peak_is_global_max(&template) {
            break;
        }
        h.amplitude *= 0.8;
        l.amplitude *= 0.8;
    }
    let channel_gains = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let channel_delays = std::array::from_fn(|_| rng.random_range(-0.01..0.01));
    let dropout_channel = rng
        .random_bool(0.5)
        .then(|| rng.random_range(0..CHANNELS));
    SubjectProfile {
        lobes: vec![j, h, l],
        template,
        sample_rate,
        mean_rr: 0.85,
        rr_jitter: 0.04,
        resp_freq: 0.25,
        resp_amp: 0.5,
        gt_lag: 0.08,
        gt_jitter: 0.02,
        channel_gains,
        channel_delays,
        dropout_channel,
        noise_sigma: 0.2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecording {
    pub recording: Recording,
    /// True beat times paired index-by-index with `recording.gt_beats`.
    pub true_beats: Vec<f64>,
}

/// Renders `duration` seconds of the subject, deterministically from `seed`.
pub fn generate(profile: &SubjectProfile, duration: f64, seed: u64) -> Result<SyntheticRecording> {
    profile.validate()?;
    if !(duration >= 10.0) {
        return Err(Error::Config(format!("duration {duration} s is below 10 s")));
    }
    let fs = profile.sample_rate;
    let n = (duration * fs).round() as usize;
    let end = n as f64 / fs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut beats = Vec::new();
    let mut t = 0.2 + profile.mean_rr * 0.5;
    while t < end {
        beats.push(t);
        t += (profile.mean_rr + profile.rr_jitter * normal()).max(MIN_RR);
    }
    let mut true_beats = Vec::new();
    let mut gt_beats = Vec::new();
    for &b in &beats {
        let jitter = (profile.gt_jitter * normal()).clamp(-MAX_GT_JITTER, MAX_GT_JITTER);
        let g = b + profile.gt_lag + jitter;
        if (0.0..=end).contains(&g) {
            true_beats.push(b);
            gt_beats.push(g);
        }
    }
    let phase = 2.0 * std::f64::consts::PI * normal().abs().fract();

    let mut channels = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let gain = if profile.dropout_channel == Some(c) {
            DROPOUT_GAIN
        } else {
            profile.channel_gains[c]
        };
        let delay = profile.channel_delays[c];
        let mut x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                profile.resp_amp
                    * gain
                    * (2.0 * std::f64::consts::PI * profile.resp_freq * t + phase).sin()
            })
            .collect();
        for &b in &beats {
            let centre = b + delay;
            let lo = ((centre - SUPPORT) * fs).ceil().max(0.0) as usize;
            let hi = (((centre + SUPPORT) * fs).floor().max(-1.0) + 1.0) as usize;
            for (i, v) in x.iter_mut().enumerate().take(hi.min(n)).skip(lo) {
                *v += gain * profile.waveform(i as f64 / fs - centre);
            }
        }
        if profile.noise_sigma > 0.0 {
            for v in x.iter_mut() {
                *v += profile.noise_sigma * normal();
            }
        }
        channels.push(x);
    }
    let recording = Recording::new(fs, 0.0, channels, gt_beats, format!("synthetic-{seed}"))?;
    Ok(SyntheticRecording {
        recording,
        true_beats,
    })
}
