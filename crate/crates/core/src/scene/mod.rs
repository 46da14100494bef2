//! Synthetic free-field acoustic scene.
//!
//! Every source is a far-field plane wave. Its signal reaches microphone `k` through
//! the relative impulse response (ReIR) `h_k`, a fractional delay of
//! `D0 + τ_k·fs` samples where `τ_k` is the arrival-time offset of mic `k` relative
//! to the microphone the wave reaches first. Desired and noise contributions are
//! kept separate per microphone so that metrics can use ground truth.

mod config;
pub mod geometry;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::dsp::filter::filter_slice;
use crate::dsp::signal::mean_square;
use crate::dsp::{fractional_delay_ir, gen_signal, read_wav_mono, ImpulseResponse, SignalKind};
use crate::error::{AncError, Result};

pub use config::{SceneConfig, SCENE_SCHEMA_VERSION};
pub use geometry::{build_geometry, ArrayGeometry, GeometryPreset, Point, SPEED_OF_SOUND};

/// Default bulk delay applied to every ReIR.
pub const DEFAULT_BULK_DELAY: usize = 8;

/// ReIRs of one direction of arrival, indexed like the microphones of the geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReirSet {
    pub reirs: Vec<ImpulseResponse>,
    pub doa_deg: f64,
    pub ref_mic: usize,
    pub bulk_delay: usize,
}

impl ReirSet {
    pub fn len(&self) -> usize {
        self.reirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reirs.is_empty()
    }
}

/// ReIR set with the default bulk delay.
pub fn synth_reirs(geometry: &ArrayGeometry, doa_deg: f64, ref_mic: usize, fs: f64, l: usize) -> Result<ReirSet> {
    synth_reirs_with_bulk(geometry, doa_deg, ref_mic, fs, l, DEFAULT_BULK_DELAY)
}

pub fn synth_reirs_with_bulk(
    geometry: &ArrayGeometry,
    doa_deg: f64,
    ref_mic: usize,
    fs: f64,
    l: usize,
    bulk_delay: usize,
) -> Result<ReirSet> {
    geometry.validate()?;
    if ref_mic >= geometry.num_mics() {
        return Err(AncError::Configuration(format!("reference mic {ref_mic} out of range")));
    }
    let t_ref = geometry.arrival_time(ref_mic, doa_deg);
    let reirs = (0..geometry.num_mics())
        .map(|k| {
            let rel = (geometry.arrival_time(k, doa_deg) - t_ref) * fs;
            // Round-off from the geometry must not turn a zero offset into a tiny negative one.
            let rel = if rel.abs() < 1e-9 { 0.0 } else { rel };
            let delay = bulk_delay as f64 + rel;
            if delay < 0.0 {
                return Err(AncError::BulkDelayTooSmall(format!(
                    "mic {k} leads the reference mic by {:.3} samples but the bulk delay is {bulk_delay}",
                    -rel
                )));
            }
            fractional_delay_ir(delay, l, fs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReirSet { reirs, doa_deg, ref_mic, bulk_delay })
}

/// Where a source's waveform comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Azimuth in degrees, counter-clockwise from straight ahead.
    pub doa_deg: f64,
    #[serde(default = "default_distance")]
    pub distance_m: f64,
    pub signal: SignalKind,
    #[serde(default)]
    pub seed: u64,
    /// Mono WAV file replacing the generated signal.
    #[serde(default)]
    pub wav: Option<PathBuf>,
    #[serde(default)]
    pub level_db: f64,
}

fn default_distance() -> f64 {
    2.0
}

impl SourceSpec {
    pub fn generated(doa_deg: f64, signal: SignalKind, seed: u64) -> Self {
        SourceSpec { doa_deg, distance_m: default_distance(), signal, seed, wav: None, level_db: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m.is_finite() && self.distance_m > 0.0) {
            return Err(AncError::Configuration(format!("source distance {} must be positive", self.distance_m)));
        }
        if !self.doa_deg.is_finite() || !self.level_db.is_finite() {
            return Err(AncError::Configuration("non-finite source direction or level".into()));
        }
        Ok(())
    }

    /// Source waveform, `length` samples at `fs`, scaled by `level_db`.
    pub fn waveform(&self, length: usize, fs: f64) -> Result<Vec<f64>> {
        let raw = match &self.wav {
            Some(path) => {
                let sig = read_wav_mono(path)?;
                if sig.sample_rate() != fs {
                    return Err(AncError::Configuration(format!(
                        "{} is sampled at {} Hz, scene runs at {fs} Hz",
                        path.display(),
                        sig.sample_rate()
                    )));
                }
                if sig.len() < length {
                    return Err(AncError::InsufficientData(format!(
                        "{} has {} samples, {length} needed",
                        path.display(),
                        sig.len()
                    )));
                }
                sig.into_samples()[..length].to_vec()
            }
            None => gen_signal(self.signal, length, self.seed, fs)?.into_samples(),
        };
        let gain = 10f64.powf(self.level_db / 20.0);
        Ok(raw.into_iter().map(|v| v * gain).collect())
    }
}

/// Microphone self-noise injected into a subset of channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoiseSpec {
    pub ssnr_db: f64,
    pub affected: Vec<usize>,
    pub reference_mic: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticScene {
    pub geometry: ArrayGeometry,
    pub desired: SourceSpec,
    pub noises: Vec<SourceSpec>,
    /// Pure secondary-path delay in samples.
    pub secondary_delay: usize,
    /// Optional extra secondary-path response convolved with the delay.
    pub secondary_ir: Option<Vec<f64>>,
    pub sensor_noise: Option<SensorNoiseSpec>,
    /// Rescales all noise so the error-mic desired-to-noise power ratio equals this value.
    pub snr_db: Option<f64>,
    pub fs: f64,
    /// Control-filter length `L`.
    pub filter_len: usize,
    pub bulk_delay: usize,
}

impl AcousticScene {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.desired.validate()?;
        for n in &self.noises {
            n.validate()?;
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(AncError::Configuration(format!("invalid sample rate {}", self.fs)));
        }
        if self.filter_len < self.secondary_delay + 1 {
            return Err(AncError::Causality(format!(
                "filter length {} must exceed the secondary delay {}",
                self.filter_len, self.secondary_delay
            )));
        }
        Ok(())
    }

    /// ReIRs of the desired direction relative to the mic it reaches first.
    pub fn desired_reirs(&self) -> Result<ReirSet> {
        let ref_mic = self.geometry.closest_mic(self.desired.doa_deg);
        synth_reirs_with_bulk(&self.geometry, self.desired.doa_deg, ref_mic, self.fs, self.filter_len, self.bulk_delay)
    }
}

/// Rendered microphone signals with desired and noise parts kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub fs: f64,
    pub error_mic: usize,
    pub filter_len: usize,
    /// Desired component per microphone, `s_k(n)`.
    pub desired: Vec<Vec<f64>>,
    /// Noise component per microphone, `v_k(n)` (acoustic noise plus any sensor noise).
    pub noise: Vec<Vec<f64>>,
    /// Desired source waveform before propagation.
    pub desired_source: Vec<f64>,
    /// ReIRs of the desired direction.
    pub reirs: ReirSet,
    pub secondary: ImpulseResponse,
    /// Sensor-noise variance added to the affected mics (0 when none).
    pub sensor_noise_power: f64,
}

impl RenderedScene {
    pub fn num_mics(&self) -> usize {
        self.desired.len()
    }

    pub fn len(&self) -> usize {
        self.desired.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full microphone signal `s_k + v_k`.
    pub fn mic_signal(&self, k: usize) -> Vec<f64> {
        self.desired[k].iter().zip(&self.noise[k]).map(|(a, b)| a + b).collect()
    }

    /// Desired component at the error mic, `s(n)`.
    pub fn s(&self) -> &[f64] {
        &self.desired[self.error_mic]
    }

    /// Noise component at the error mic, `v(n)`.
    pub fn v(&self) -> &[f64] {
        &self.noise[self.error_mic]
    }

    /// Disturbance at the error mic, `d(n) = s(n) + v(n)`.
    pub fn d(&self) -> Vec<f64> {
        self.mic_signal(self.error_mic)
    }

    /// Copy with the desired part scaled by `a` and the noise part by `b`.
    pub fn with_gains(&self, a: f64, b: f64) -> RenderedScene {
        let scale = |x: &Vec<Vec<f64>>, g: f64| x.iter().map(|c| c.iter().map(|v| v * g).collect()).collect();
        RenderedScene {
            desired: scale(&self.desired, a),
            noise: scale(&self.noise, b),
            desired_source: self.desired_source.iter().map(|v| v * a).collect(),
            sensor_noise_power: self.sensor_noise_power * b * b,
            ..self.clone()
        }
    }

    /// Copy with the desired component removed.
    pub fn noise_only(&self) -> RenderedScene {
        self.with_gains(0.0, 1.0)
    }

    /// Copy with the noise component removed.
    pub fn desired_only(&self) -> RenderedScene {
        self.with_gains(1.0, 0.0)
    }
}

/// Propagates `source` (plane wave from `doa_deg`) to every microphone.
pub fn propagate(geometry: &ArrayGeometry, source: &[f64], doa_deg: f64, fs: f64, l: usize, bulk_delay: usize) -> Result<Vec<Vec<f64>>> {
    let set = synth_reirs_with_bulk(geometry, doa_deg, geometry.closest_mic(doa_deg), fs, l, bulk_delay)?;
    Ok(set.reirs.iter().map(|h| filter_slice(h.taps(), source)).collect())
}

pub fn render(scene: &AcousticScene, duration: usize) -> Result<RenderedScene> {
    scene.validate()?;
    if duration == 0 {
        return Err(AncError::InvalidDimension("render duration must be at least 1 sample".into()));
    }
    let k = scene.geometry.num_mics();
    let reirs = scene.desired_reirs()?;
    let desired_source = scene.desired.waveform(duration, scene.fs)?;
    let desired: Vec<Vec<f64>> = reirs.reirs.iter().map(|h| filter_slice(h.taps(), &desired_source)).collect();

    let mut noise = vec![vec![0.0; duration]; k];
    for spec in &scene.noises {
        let src = spec.waveform(duration, scene.fs)?;
        let comps = propagate(&scene.geometry, &src, spec.doa_deg, scene.fs, scene.filter_len, scene.bulk_delay)?;
        for (acc, c) in noise.iter_mut().zip(comps) {
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
    }
    let err = scene.geometry.error_mic_index;
    if let (Some(snr_db), false) = (scene.snr_db, scene.noises.is_empty()) {
        let ps = mean_square(&desired[err]);
        let pv = mean_square(&noise[err]);
        if ps <= 0.0 || pv <= 0.0 {
            return Err(AncError::Configuration("cannot set an SNR with a silent desired or noise component".into()));
        }
        let gain = (ps / pv / 10f64.powf(snr_db / 10.0)).sqrt();
        noise.iter_mut().flatten().for_each(|v| *v *= gain);
    }

    let rendered = RenderedScene {
        fs: scene.fs,
        error_mic: err,
        filter_len: scene.filter_len,
        desired,
        noise,
        desired_source,
        reirs,
        secondary: secondary_path(scene)?,
        sensor_noise_power: 0.0,
    };
    match &scene.sensor_noise {
        Some(sn) => add_sensor_noise(&rendered, sn.ssnr_db, &sn.affected, sn.reference_mic, sn.seed),
        None => Ok(rendered),
    }
}

/// Secondary path `g`: a pure delay, optionally convolved with a user response, `L` taps long.
pub fn secondary_path(scene: &AcousticScene) -> Result<ImpulseResponse> {
    secondary_path_from(scene.secondary_delay, scene.secondary_ir.as_deref(), scene.filter_len, scene.fs)
}

pub fn secondary_path_from(delay: usize, extra: Option<&[f64]>, l: usize, fs: f64) -> Result<ImpulseResponse> {
    if delay >= l {
        return Err(AncError::Causality(format!("secondary delay {delay} must be below the filter length {l}")));
    }
    let mut taps = vec![0.0; l];
    match extra {
        None => taps[delay] = 1.0,
        Some(ir) => {
            for (i, &v) in ir.iter().enumerate() {
                if delay + i < l {
                    taps[delay + i] = v;
                }
            }
        }
    }
    ImpulseResponse::new(taps, fs)
}

/// Adds independent Gaussian white noise to the `affected` microphones.
///
/// The variance is set so that the clean power at `reference_mic` divided by the
/// noise variance equals `10^(ssnr_db/10)`.
pub fn add_sensor_noise(
    rendered: &RenderedScene,
    ssnr_db: f64,
    affected: &[usize],
    reference_mic: usize,
    seed: u64,
) -> Result<RenderedScene> {
    if affected.is_empty() {
        return Ok(rendered.clone());
    }
    if let Some(&bad) = affected.iter().chain(std::iter::once(&reference_mic)).find(|&&m| m >= rendered.num_mics()) {
        return Err(AncError::Configuration(format!("sensor-noise mic index {bad} out of range")));
    }
    let clean = mean_square(&rendered.mic_signal(reference_mic));
    if clean <= 0.0 {
        return Err(AncError::UndefinedMetric(format!("SsNR undefined: zero clean power at mic {reference_mic}")));
    }
    let power = clean / 10f64.powf(ssnr_db / 10.0);
    let normal = Normal::new(0.0, power.sqrt()).map_err(|e| AncError::Numerical(e.to_string()))?;
    let mut out = rendered.clone();
    for &m in affected {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(m as u64 + 1));
        for v in out.noise[m].iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.sensor_noise_power = power;
    Ok(out)
}
