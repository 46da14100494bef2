//! Seeded test-signal generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::signal::Signal;
use crate::error::{AncError, Result};

/// Kind of generated signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalKind {
    White,
    Pink,
    Tone { freq_hz: f64 },
    /// Pink noise with a 4 Hz syllabic envelope and seeded pauses.
    SpeechLike,
}

impl SignalKind {
    /// Parses the short names used on the command line (`white`, `pink`, `speech_like`, `tone:<hz>`).
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "speech_like" => Ok(Self::SpeechLike),
            other => match other.strip_prefix("tone:").map(str::parse::<f64>) {
                Some(Ok(freq_hz)) => Ok(Self::Tone { freq_hz }),
                _ => Err(AncError::Configuration(format!("unknown signal kind '{other}'"))),
            },
        }
    }
}

/// Lowest pole of the pink shaping filter.
pub const PINK_LOWEST_POLE_HZ: f64 = 10.0;
const PINK_SECTIONS: usize = 6;

/// Syllable-rate modulation frequency of the speech-like surrogate.
pub const SPEECH_MODULATION_HZ: f64 = 4.0;

/// Generates `length` samples of the requested kind, scaled to unit RMS.
pub fn gen_signal(kind: SignalKind, length: usize, seed: u64, fs: f64) -> Result<Signal> {
    if length == 0 {
        return Err(AncError::InvalidDimension("signal length must be at least 1".into()));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(AncError::Configuration(format!("invalid sample rate {fs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        SignalKind::White => white(&mut rng, length),
        SignalKind::Pink => pink(&mut rng, length, fs),
        SignalKind::Tone { freq_hz } => {
            if !(freq_hz > 0.0 && freq_hz < fs / 2.0) {
                return Err(AncError::Configuration(format!("tone frequency {freq_hz} Hz outside (0, fs/2)")));
            }
            let phase = rng.random::<f64>() * 2.0 * PI;
            (0..length).map(|n| (2.0 * PI * freq_hz * n as f64 / fs + phase).sin()).collect()
        }
        SignalKind::SpeechLike => {
            let base = pink(&mut rng, length, fs);
            let env = speech_envelope(&mut rng, length, fs);
            base.iter().zip(&env).map(|(b, e)| b * e).collect()
        }
    };
    Signal::new(normalize_rms(samples), fs)
}

fn white(rng: &mut ChaCha8Rng, length: usize) -> Vec<f64> {
    (0..length).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Pole/zero corner frequencies of the -3 dB/octave shaping filter.
///
/// Poles are geometrically spaced from [`PINK_LOWEST_POLE_HZ`]; each zero sits half a
/// spacing above its pole so the response alternates -6/0 dB/octave segments.
pub fn pink_corners(fs: f64) -> Vec<(f64, f64)> {
    let top = 0.45 * fs;
    let ratio = (top / PINK_LOWEST_POLE_HZ).powf(1.0 / (PINK_SECTIONS as f64 - 0.5));
    (0..PINK_SECTIONS)
        .map(|i| {
            let p = PINK_LOWEST_POLE_HZ * ratio.powi(i as i32);
            (p, p * ratio.sqrt())
        })
        .collect()
}

fn pink(rng: &mut ChaCha8Rng, length: usize, fs: f64) -> Vec<f64> {
    // Discard a start-up segment so the slowest pole has settled.
    let settle = (fs / PINK_LOWEST_POLE_HZ * 2.0).ceil() as usize;
    let mut x = white(rng, length + settle);
    for (p, z) in pink_corners(fs) {
        let a = (-2.0 * PI * p / fs).exp();
        let b = (-2.0 * PI * z / fs).exp();
        let (mut x1, mut y1) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = *v - b * x1 + a * y1;
            x1 = *v;
            y1 = y;
            *v = y;
        }
    }
    x.split_off(settle)
}

/// Raised-cosine syllabic envelope at [`SPEECH_MODULATION_HZ`] with seeded phrase pauses.
fn speech_envelope(rng: &mut ChaCha8Rng, length: usize, fs: f64) -> Vec<f64> {
    let phase = rng.random::<f64>() * 2.0 * PI;
    let mut gate = vec![0.0; length];
    let mut n = 0usize;
    while n < length {
        let phrase = ((0.8 + 1.7 * rng.random::<f64>()) * fs) as usize;
        let pause = ((0.15 + 0.45 * rng.random::<f64>()) * fs) as usize;
        let end = (n + phrase).min(length);
        gate[n..end].iter_mut().for_each(|g| *g = 1.0);
        n = end + pause;
    }
    // 20 ms ramps on the phrase gate avoid clicks.
    let ramp = (0.02 * fs).max(1.0) as usize;
    let smoothed = moving_average(&gate, ramp);
    (0..length)
        .map(|i| {
            let t = i as f64 / fs;
            let syllable = 0.5 * (1.0 - (2.0 * PI * SPEECH_MODULATION_HZ * t + phase).cos());
            smoothed[i] * (0.1 + 0.9 * syllable)
        })
        .collect()
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= width {
            acc -= x[i - width];
        }
        out[i] = acc / width as f64;
    }
    out
}
