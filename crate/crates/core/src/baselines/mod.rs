//! Reference systems: unconstrained hybrid ANC, the Frost extractor and the two
//! hear-through configurations.

mod frost;

use serde::{Deserialize, Serialize};

use crate::adaptive::{
    check_divergence, divergence_threshold, gather_refs, run_closed_loop, Controller, DelayLine, ExtractorLayout, Injection, LoopConfig,
    LoopLayout, Plant, SimulationTrace, SnapshotRecorder, VssParams,
};
use crate::adaptive::components_of;
use crate::constraint::ProjectionPair;
use crate::metrics::ComponentFilter;
use crate::error::{AncError, Result};
use crate::scene::RenderedScene;

pub use frost::{frost_beamformer_run, FrostBeamformer, DEFAULT_FROST_MU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    UnconstrainedHybrid,
    PartiallyCoupled,
    Decoupled,
}

/// Baseline description carried in the scene file under `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Reference microphones of the ANC part (the error mic is always added).
    pub anc_mics: Vec<usize>,
    /// Beamformer microphones of the extractor.
    #[serde(default)]
    pub bf_mics: Vec<usize>,
    #[serde(default)]
    pub extraction_delay_ms: f64,
    /// `null` mutes the extracted signal.
    #[serde(default = "zero_db")]
    pub extraction_gain_db: Option<f64>,
}

fn zero_db() -> Option<f64> {
    Some(0.0)
}

impl BaselineConfig {
    pub fn validate(&self, num_mics: usize, error_mic: usize) -> Result<()> {
        if let Some(&m) = self.anc_mics.iter().chain(&self.bf_mics).find(|&&m| m >= num_mics) {
            return Err(AncError::Configuration(format!("baseline mic index {m} out of range")));
        }
        if self.anc_mics.contains(&error_mic) {
            return Err(AncError::Configuration("the error mic is added to anc_mics automatically".into()));
        }
        if self.kind != BaselineKind::UnconstrainedHybrid && self.bf_mics.len() < 2 {
            return Err(AncError::Configuration("the extractor needs at least 2 beamformer mics".into()));
        }
        if self.kind == BaselineKind::Decoupled && self.bf_mics.iter().any(|m| self.anc_mics.contains(m) || *m == error_mic) {
            return Err(AncError::Configuration("decoupled configuration needs disjoint ANC and beamformer mics".into()));
        }
        if !self.extraction_delay_ms.is_finite() || self.extraction_delay_ms < 0.0 {
            return Err(AncError::Configuration("extraction delay must be a non-negative number of ms".into()));
        }
        Ok(())
    }

    /// Linear gain of the extracted signal (0 when muted).
    pub fn extraction_gain(&self) -> f64 {
        self.extraction_gain_db.map_or(0.0, |g| 10f64.powf(g / 20.0))
    }

    /// Extraction delay rounded to samples.
    pub fn extraction_delay_samples(&self, fs: f64) -> usize {
        (self.extraction_delay_ms * 1e-3 * fs).round() as usize
    }

    /// Every non-error mic feeds the ANC.
    pub fn unconstrained(num_mics: usize, error_mic: usize) -> Self {
        BaselineConfig {
            kind: BaselineKind::UnconstrainedHybrid,
            anc_mics: (0..num_mics).filter(|&m| m != error_mic).collect(),
            bf_mics: Vec::new(),
            extraction_delay_ms: 0.0,
            extraction_gain_db: Some(0.0),
        }
    }

    /// All mics feed the ANC, `bf_mics` the extractor, 1 ms delay, 0 dB.
    pub fn partially_coupled(num_mics: usize, error_mic: usize, bf_mics: Vec<usize>) -> Self {
        BaselineConfig {
            kind: BaselineKind::PartiallyCoupled,
            bf_mics,
            extraction_delay_ms: 1.0,
            ..Self::unconstrained(num_mics, error_mic)
        }
    }

    /// Dedicated ANC references, extractor on `bf_mics`, 5 ms delay, 0 dB.
    pub fn decoupled(anc_mics: Vec<usize>, bf_mics: Vec<usize>) -> Self {
        BaselineConfig {
            kind: BaselineKind::Decoupled,
            anc_mics,
            bf_mics,
            extraction_delay_ms: 5.0,
            extraction_gain_db: Some(0.0),
        }
    }

    /// ANC channel list: references in the given order, error mic last.
    pub fn channel_mics(&self, error_mic: usize) -> Vec<usize> {
        self.anc_mics.iter().copied().chain(std::iter::once(error_mic)).collect()
    }
}

/// Traditional hybrid FxLMS: the proposed loop with `P = I`, `q = 0`.
pub fn run_unconstrained(scene: &RenderedScene, config: &BaselineConfig, loop_config: &LoopConfig) -> Result<SimulationTrace> {
    config.validate(scene.num_mics(), scene.error_mic)?;
    let mics = config.channel_mics(scene.error_mic);
    run_closed_loop(scene, &mics, ProjectionPair::identity(mics.len() * scene.filter_len), loop_config)
}

/// Runs the configured baseline.
pub fn run_baseline(scene: &RenderedScene, config: &BaselineConfig, loop_config: &LoopConfig, frost_mu: f64) -> Result<SimulationTrace> {
    match config.kind {
        BaselineKind::UnconstrainedHybrid => run_unconstrained(scene, config, loop_config),
        BaselineKind::PartiallyCoupled => run_partially_coupled(scene, config, loop_config, frost_mu),
        BaselineKind::Decoupled => run_decoupled(scene, config, loop_config, frost_mu),
    }
}

/// Extractor aimed at the desired direction whose output matches the desired component
/// at the error microphone.
fn error_mic_extractor(scene: &RenderedScene, config: &BaselineConfig, mu: f64) -> Result<FrostBeamformer> {
    let reirs: Vec<_> = config.bf_mics.iter().map(|&m| scene.reirs.reirs[m].clone()).collect();
    FrostBeamformer::new(&reirs, &scene.reirs.reirs[scene.error_mic], scene.filter_len, mu)
}

/// Hear-through by adding the delayed extracted signal to the error signal that drives
/// adaptation, so the ANC reproduces it at the ear.
pub fn run_partially_coupled(scene: &RenderedScene, config: &BaselineConfig, loop_config: &LoopConfig, frost_mu: f64) -> Result<SimulationTrace> {
    if config.kind != BaselineKind::PartiallyCoupled {
        return Err(AncError::Configuration(format!("expected a partially coupled config, got {:?}", config.kind)));
    }
    run_hear_through(scene, config, loop_config, frost_mu, Injection::ErrorSignal)
}

/// Hear-through by injecting the delayed extracted signal into the loudspeaker drive of
/// an ANC that uses its own reference microphones.
pub fn run_decoupled(scene: &RenderedScene, config: &BaselineConfig, loop_config: &LoopConfig, frost_mu: f64) -> Result<SimulationTrace> {
    if config.kind != BaselineKind::Decoupled {
        return Err(AncError::Configuration(format!("expected a decoupled config, got {:?}", config.kind)));
    }
    let ds = scene.secondary.leading_zeros(0.0);
    let delay = config.extraction_delay_samples(scene.fs);
    if delay < ds {
        return Err(AncError::Causality(format!(
            "extraction delay of {delay} samples is shorter than the secondary path delay {ds}"
        )));
    }
    run_hear_through(scene, config, loop_config, frost_mu, Injection::SecondaryDrive { pre_delay: delay - ds })
}

fn run_hear_through(
    scene: &RenderedScene,
    config: &BaselineConfig,
    loop_config: &LoopConfig,
    frost_mu: f64,
    injection: Injection,
) -> Result<SimulationTrace> {
    config.validate(scene.num_mics(), scene.error_mic)?;
    let l = scene.filter_len;
    let mics = config.channel_mics(scene.error_mic);
    let gain = config.extraction_gain();
    let delay = config.extraction_delay_samples(scene.fs);
    let mut ctrl = Controller::new(&scene.secondary, mics.len(), l, ProjectionPair::identity(mics.len() * l), loop_config.vss)?
        .with_projection_stride(loop_config.projection_stride);
    let mut plant = Plant::new(&scene.secondary)?;
    let mut frost = error_mic_extractor(scene, config, frost_mu)?;
    let g = scene.secondary.taps();
    let signals: Vec<Vec<f64>> = (0..scene.num_mics()).map(|m| scene.mic_signal(m)).collect();
    let d = signals[scene.error_mic].clone();
    let n_total = scene.len();
    let threshold = divergence_threshold(&d, loop_config.divergence_factor);
    let layout = LoopLayout {
        channel_mics: mics.clone(),
        error_mic: scene.error_mic,
        filter_len: l,
        secondary: g.to_vec(),
        extractor: Some(ExtractorLayout { mics: config.bf_mics.clone(), filter_len: frost.filter_len(), gain, delay, injection }),
    };
    let mut shadows = [ComponentFilter::new(&layout), ComponentFilter::new(&layout)];
    let mut rec = SnapshotRecorder::new(loop_config.hop, n_total);
    let mut refs = vec![0.0; mics.len() - 1];
    let mut bf = vec![0.0; config.bf_mics.len()];
    // Extracted-signal history, long enough for the delay and the secondary-path model.
    let mut extracted = DelayLine::new(delay.max(g.len()) + 1);
    let mut injected = DelayLine::new(g.len());
    let (mut e_out, mut y_out) = (Vec::with_capacity(n_total), Vec::with_capacity(n_total));
    let mut divergence = None;
    for n in 0..n_total {
        let e = plant.error(d[n]);
        gather_refs(&signals, &config.bf_mics, n, &mut bf);
        // Both filters are snapshotted before they adapt on this sample.
        rec.observe(n, ctrl.weights(), Some(frost.weights()), ctrl.mu());
        shadows[0].push(&scene.desired, n, ctrl.weights(), Some(frost.weights()));
        shadows[1].push(&scene.noise, n, ctrl.weights(), Some(frost.weights()));
        let s_hat = frost.step(&bf);
        extracted.push(s_hat);
        gather_refs(&signals, &mics[..mics.len() - 1], n, &mut refs);
        ctrl.push_inputs(&refs, e)?;
        let y_anc = ctrl.output();
        let (y, err) = match injection {
            Injection::ErrorSignal => (y_anc, e - gain * extracted.view()[delay]),
            Injection::SecondaryDrive { pre_delay } => {
                let inj = gain * extracted.view()[pre_delay];
                injected.push(inj);
                // Remove the injected part (as heard through the secondary-path model).
                let heard: f64 = g.iter().zip(injected.view()).skip(1).map(|(a, b)| a * b).sum();
                (y_anc + inj, e - heard)
            }
        };
        e_out.push(e);
        y_out.push(y);
        if let Some(report) = check_divergence(n, e, y, threshold) {
            divergence = Some(report);
            break;
        }
        ctrl.adapt(err);
        ctrl.record_drive(y);
        plant.push(y);
    }
    let len = e_out.len();
    rec.finish(len, ctrl.weights(), Some(frost.weights()), ctrl.mu());
    let components = components_of(shadows, &layout, scene);
    Ok(SimulationTrace {
        fs: scene.fs,
        e: e_out,
        y: y_out,
        d: d[..len].to_vec(),
        mu: rec.mu,
        hop: loop_config.hop.max(1),
        snapshots: rec.snapshots,
        layout,
        divergence,
        components: Some(components),
    })
}

/// Largest fixed step size (geometric bisection in `[lo, hi]`) for which `stable` holds.
pub fn max_stable_mu<F>(mut stable: F, lo: f64, hi: f64, iterations: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<bool>,
{
    if !(lo > 0.0 && hi > lo) {
        return Err(AncError::Configuration(format!("invalid step-size bracket [{lo}, {hi}]")));
    }
    if !stable(lo)? {
        return Ok(0.0);
    }
    if stable(hi)? {
        return Ok(hi);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..iterations {
        let mid = (a * b).sqrt();
        if stable(mid)? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(a)
}

/// Whether a baseline stays bounded over the whole scene with a fixed step size `mu`.
pub fn baseline_is_stable(scene: &RenderedScene, config: &BaselineConfig, mu: f64, fs_hop: usize, frost_mu: f64) -> Result<bool> {
    let loop_config = LoopConfig { vss: VssParams::fixed(mu), hop: fs_hop, projection_stride: 1, divergence_factor: 1e3 };
    Ok(!run_baseline(scene, config, &loop_config, frost_mu)?.diverged())
}
