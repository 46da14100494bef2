use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::io::Write;

use super::signal::Signal;
use crate::error::{AncError, Result};

/// One-sided power spectral density (power per Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs_hz: Vec<f64>,
    pub psd: Vec<f64>,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        if self.freqs_hz.len() > 1 {
            self.freqs_hz[1] - self.freqs_hz[0]
        } else {
            0.0
        }
    }

    /// Integrated power over all bins.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.bin_width()
    }

    /// Integrated power over bins with `lo <= f < hi`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        self.freqs_hz
            .iter()
            .zip(&self.psd)
            .filter(|(f, _)| **f >= lo && **f < hi)
            .map(|(_, p)| p)
            .sum::<f64>()
            * self.bin_width()
    }

    pub fn power_db(&self) -> Vec<f64> {
        self.psd.iter().map(|p| 10.0 * p.max(1e-30).log10()).collect()
    }

    pub fn peak_frequency(&self) -> f64 {
        let (i, _) = self
            .psd
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        self.freqs_hz[i]
    }

    /// Writes `frequency_hz,power_db` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "frequency_hz,power_db")?;
        for (f, p) in self.freqs_hz.iter().zip(self.power_db()) {
            writeln!(out, "{f},{p}")?;
        }
        Ok(())
    }
}

/// Welch estimate: Hann window, 50 % overlap, averaged periodograms.
///
/// Scaled so that the integrated PSD equals the mean square of the input
/// (up to the usual windowing bias).
pub fn welch_psd(x: &Signal, nfft: usize) -> Result<Spectrum> {
    welch_psd_slice(x.samples(), x.sample_rate(), nfft)
}

pub fn welch_psd_slice(x: &[f64], fs: f64, nfft: usize) -> Result<Spectrum> {
    if nfft < 2 {
        return Err(AncError::InvalidDimension("nfft must be at least 2".into()));
    }
    if x.len() < nfft {
        return Err(AncError::InvalidDimension(format!("signal of {} samples is shorter than nfft = {nfft}", x.len())));
    }
    let window: Vec<f64> = (0..nfft).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / nfft as f64).cos()).collect();
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let hop = nfft / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let bins = nfft / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut segments = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut start = 0;
    while start + nfft <= x.len() {
        for (b, (&xi, &w)) in buf.iter_mut().zip(x[start..start + nfft].iter().zip(&window)) {
            *b = Complex64::new(xi * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (fs * win_power * segments as f64);
    let psd = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || (nfft % 2 == 0 && k == nfft / 2) { 1.0 } else { 2.0 };
            p * scale * one_sided
        })
        .collect();
    let freqs_hz = (0..bins).map(|k| k as f64 * fs / nfft as f64).collect();
    Ok(Spectrum { freqs_hz, psd })
}
