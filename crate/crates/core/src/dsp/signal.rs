use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{ensure_finite, AncError, Result};

/// Finite impulse response with its sample rate.
///
/// Used for relative impulse responses, the secondary path and weighting filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    taps: Vec<f64>,
    sample_rate: f64,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(AncError::InvalidDimension("impulse response needs at least one tap".into()));
        }
        check_rate(sample_rate)?;
        ensure_finite(&taps, "impulse response")?;
        Ok(Self { taps, sample_rate })
    }

    /// Unit impulse at integer tap `delay`, zero-padded to `len` taps.
    pub fn delta(delay: usize, len: usize, sample_rate: f64) -> Result<Self> {
        if delay >= len {
            return Err(AncError::Causality(format!("delta at tap {delay} does not fit in {len} taps")));
        }
        let mut taps = vec![0.0; len];
        taps[delay] = 1.0;
        Self::new(taps, sample_rate)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Full linear convolution of two responses (length `a + b - 1`).
    pub fn convolve(&self, other: &ImpulseResponse) -> Result<ImpulseResponse> {
        if self.sample_rate != other.sample_rate {
            return Err(AncError::Configuration(format!(
                "sample-rate mismatch: {} Hz vs {} Hz",
                self.sample_rate, other.sample_rate
            )));
        }
        ImpulseResponse::new(convolve_full(&self.taps, &other.taps), self.sample_rate)
    }

    /// Zero-pads or truncates to exactly `len` taps.
    pub fn resized(&self, len: usize) -> Result<ImpulseResponse> {
        let mut taps = self.taps.clone();
        taps.resize(len, 0.0);
        ImpulseResponse::new(taps, self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> ImpulseResponse {
        ImpulseResponse { taps: self.taps.iter().map(|t| t * gain).collect(), sample_rate: self.sample_rate }
    }

    /// DTFT at `freq_hz`.
    pub fn frequency_response(&self, freq_hz: f64) -> Complex64 {
        dtft(&self.taps, 2.0 * PI * freq_hz / self.sample_rate)
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.frequency_response(freq_hz).norm().max(1e-300).log10()
    }

    /// Index of the first tap whose magnitude exceeds `tol`, if any.
    pub fn leading_zeros(&self, tol: f64) -> usize {
        self.taps.iter().position(|t| t.abs() > tol).unwrap_or(self.taps.len())
    }

    /// Index of the last tap whose magnitude exceeds `tol`, if any.
    pub fn last_nonzero(&self, tol: f64) -> Option<usize> {
        self.taps.iter().rposition(|t| t.abs() > tol)
    }
}

/// Real-valued sampled signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        check_rate(sample_rate)?;
        ensure_finite(&samples, "signal")?;
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub(crate) fn from_raw(samples: Vec<f64>, sample_rate: f64) -> Self {
        debug_assert!(samples.iter().all(|v| v.is_finite()));
        Self { samples, sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_square(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.mean_square().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Signal {
        Signal { samples: self.samples.iter().map(|s| s * gain).collect(), sample_rate: self.sample_rate }
    }

    /// Sample-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &Signal) -> Result<Signal> {
        if self.len() != other.len() {
            return Err(AncError::InvalidDimension(format!(
                "cannot add signals of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        if self.sample_rate != other.sample_rate {
            return Err(AncError::Configuration("sample-rate mismatch in signal sum".into()));
        }
        Ok(Signal {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn truncated(&self, len: usize) -> Signal {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Signal { samples, sample_rate: self.sample_rate }
    }
}

fn check_rate(sample_rate: f64) -> Result<()> {
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(AncError::Configuration(format!("invalid sample rate {sample_rate}")));
    }
    Ok(())
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Discrete-time Fourier transform of `taps` at angular frequency `omega` (rad/sample).
pub fn dtft(taps: &[f64], omega: f64) -> Complex64 {
    taps.iter()
        .enumerate()
        .map(|(n, &t)| Complex64::from_polar(t, -omega * n as f64))
        .sum()
}
