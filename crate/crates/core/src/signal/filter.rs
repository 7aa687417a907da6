//! Butterworth band-pass design as a cascade of two biquads.
//!
//! The analog second-order Butterworth prototype is mapped to a band-pass
//! with the usual `s → (s² + Ω0²)/(sB)` substitution, using pre-warped band
//! edges so that the bilinear transform puts the −3 dB points exactly on
//! the requested cutoffs. Each conjugate pole pair becomes one section.

use std::f64::consts::PI;

use nalgebra::Complex;

use crate::error::{Error, Result};

pub const DEFAULT_LOW_HZ: f64 = 0.4;
pub const DEFAULT_HIGH_HZ: f64 = 10.0;

/// Normalized second-order section `(b0 + b1 z⁻¹ + b2 z⁻²)/(1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex<f64>) -> Complex<f64> {
        let z2 = z_inv * z_inv;
        let num = Complex::from(self.b[0]) + z_inv * self.b[1] + z2 * self.b[2];
        let den = Complex::from(1.0) + z_inv * self.a[0] + z2 * self.a[1];
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    pub sections: [Biquad; 2],
    pub sample_rate: f64,
}

impl BandPass {
    pub fn design(low_hz: f64, high_hz: f64, sample_rate: f64) -> Result<Self> {
        let nyquist = sample_rate / 2.0;
        if !(low_hz > 0.0 && low_hz < high_hz) {
            return Err(Error::Config(format!(
                "band edges must satisfy 0 < low < high (got {low_hz}, {high_hz})"
            )));
        }
        if high_hz >= nyquist {
            return Err(Error::Config(format!(
                "upper cutoff {high_hz} Hz is not below Nyquist ({nyquist} Hz)"
            )));
        }
        let k = 2.0 * sample_rate;
        let w1 = k * (PI * low_hz / sample_rate).tan();
        let w2 = k * (PI * high_hz / sample_rate).tan();
        let bw = w2 - w1;
        let w0_sq = w1 * w2;

        // Upper-half-plane prototype pole; its conjugate yields the conjugate pairs.
        let q = Complex::new(-1.0, 1.0) / 2f64.sqrt();
        let disc = (q * q * bw * bw - Complex::from(4.0 * w0_sq)).sqrt();
        let poles = [(q * bw + disc) / 2.0, (q * bw - disc) / 2.0];

        let sections = poles.map(|p| {
            let a1 = -2.0 * p.re;
            let a0 = p.norm_sqr();
            let d0 = k * k + a1 * k + a0;
            Biquad {
                b: [bw * k / d0, 0.0, -bw * k / d0],
                a: [(2.0 * a0 - 2.0 * k * k) / d0, (k * k - a1 * k + a0) / d0],
            }
        });
        Ok(Self {
            sections,
            sample_rate,
        })
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex<f64> {
        let omega = 2.0 * PI * freq_hz / self.sample_rate;
        let z_inv = Complex::new(omega.cos(), -omega.sin());
        self.sections
            .iter()
            .fold(Complex::from(1.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn gain(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    /// Causal filtering from a zero initial state (transposed direct form II).
    pub fn apply(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in out.iter_mut() {
                let x = *v;
                let y = s.b[0] * x + z1;
                z1 = s.b[1] * x - s.a[0] * y + z2;
                z2 = s.b[2] * x - s.a[1] * y;
                *v = y;
            }
        }
        out
    }
}

/// Band-pass with the default 0.4–10 Hz edges.
pub fn bandpass(signal: &[f64], sample_rate: f64) -> Result<Vec<f64>> {
    if !(sample_rate > 2.0 * DEFAULT_HIGH_HZ) {
        return Err(Error::Config(format!(
            "sample rate {sample_rate} Hz puts the 10 Hz cutoff at or above Nyquist"
        )));
    }
    Ok(BandPass::design(DEFAULT_LOW_HZ, DEFAULT_HIGH_HZ, sample_rate)?.apply(signal))
}
