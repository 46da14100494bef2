//! Experiment orchestration: spec files, system runners, evaluation and the four
//! commands (`run`, `directivity`, `robustness`, `compare`).

mod commands;
mod spec;

pub use commands::{default_baselines, default_sensor_noise_mics, cmd_compare, cmd_directivity, cmd_robustness, cmd_run, CommandOptions, CommandReport};
pub use spec::{
    config_hash, reseed, ConstraintSpan, ControllerKind, EvalConfig, ExperimentSpec, Profile, ProposedConfig, SceneSource, Sweep, DESK_VSS, EXPERIMENT_SCHEMA_VERSION,
};

use std::ops::Range;

use crate::adaptive::{run_closed_loop, LoopConfig, SimulationTrace, VssParams};
use crate::baselines::{run_baseline, BaselineConfig};
use crate::constraint::{apply_spectral_weighting, build_constraint, build_projection, SpatialConstraint};
use crate::dsp::signal::mean_square;
use crate::dsp::{min_phase_highpass, welch_psd_slice};
use crate::error::{AncError, Result};
use crate::metrics::{
    band_nr, decouple_components, estimate_lag, fixed_filter_trace, noise_reduction, ratio_db, sdi, snr_db, tail_window, BandNr,
    ComponentDecomposition, Db,
};
use crate::optimal::{accumulate_stats, solve_with_rule, OptimalSolution};
use crate::scene::RenderedScene;

/// Constraint of the proposed system, spectrally weighted when a cutoff is configured.
pub fn proposed_constraint(scene: &RenderedScene, cfg: &ProposedConfig) -> Result<SpatialConstraint> {
    let c = build_constraint(&scene.reirs.reirs, scene.error_mic, scene.reirs.ref_mic, scene.filter_len)?;
    let c = match cfg.constraint_span {
        ConstraintSpan::Filter => c,
        ConstraintSpan::Full => c.with_span(c.full_span(scene.secondary.len()))?,
        ConstraintSpan::Lags(m) => c.with_span(m)?,
    };
    match cfg.weighting_cutoff_hz {
        Some(fc) => apply_spectral_weighting(&c, &min_phase_highpass(fc, scene.fs, scene.filter_len)?),
        None => Ok(c),
    }
}

/// Scales the whole scene so the error-mic mixture has the power of its desired component,
/// keeping the input level seen by fixed step sizes constant across an SNR sweep.
pub fn level_normalized(scene: &RenderedScene) -> RenderedScene {
    let (ps, pd) = (mean_square(scene.s()), mean_square(&scene.d()));
    if ps > 0.0 && pd > 0.0 {
        let g = (ps / pd).sqrt();
        scene.with_gains(g, g)
    } else {
        scene.clone()
    }
}

/// Closed-form optimum from statistics over the whole record minus an `L`-sample warm-up.
pub fn solve_proposed(scene: &RenderedScene, cfg: &ProposedConfig) -> Result<(SpatialConstraint, OptimalSolution)> {
    let c = proposed_constraint(scene, cfg)?;
    let x: Vec<Vec<f64>> = c.channel_mics().iter().map(|&m| scene.mic_signal(m)).collect();
    let stats = accumulate_stats(&x, &scene.d(), &scene.secondary, scene.filter_len, scene.filter_len.min(scene.len() / 2))?;
    let sol = solve_with_rule(&stats, &scene.secondary, &c, cfg.regularization, scene.sensor_noise_power, cfg.inverse_mode)?;
    Ok((c, sol))
}

/// Loop settings of the proposed controller and the baselines.
pub fn loop_config(scene: &RenderedScene, cfg: &ProposedConfig, vss: VssParams) -> LoopConfig {
    LoopConfig {
        vss,
        hop: ((cfg.hop_s * scene.fs).round() as usize).max(1),
        projection_stride: cfg.projection_stride.max(1),
        divergence_factor: crate::adaptive::DEFAULT_DIVERGENCE_FACTOR,
    }
}

pub fn run_proposed_adaptive(scene: &RenderedScene, cfg: &ProposedConfig, vss: VssParams) -> Result<(SpatialConstraint, SimulationTrace)> {
    let c = proposed_constraint(scene, cfg)?;
    let projection = build_projection(&c, &scene.secondary, cfg.projection)?;
    let trace = run_closed_loop(scene, c.channel_mics(), projection, &loop_config(scene, cfg, vss))?;
    Ok((c, trace))
}

/// Output of one system on one scene.
#[derive(Debug, Clone)]
pub struct SystemRun {
    pub trace: SimulationTrace,
    pub constraint: Option<SpatialConstraint>,
    pub solution: Option<OptimalSolution>,
}

/// Everything a system needs besides the scene.
#[derive(Debug, Clone)]
pub struct SystemSettings {
    pub proposed: ProposedConfig,
    pub vss: VssParams,
    pub unconstrained: BaselineConfig,
    pub partially_coupled: BaselineConfig,
    pub decoupled: BaselineConfig,
    pub frost_mu: f64,
}

impl SystemSettings {
    /// Proposed settings plus the default baseline split for `scene`.
    pub fn for_scene(scene: &RenderedScene, proposed: ProposedConfig, profile: Profile) -> Self {
        let (pc, dc) = default_baselines(scene.num_mics(), scene.error_mic);
        SystemSettings {
            vss: proposed.vss.unwrap_or_else(|| profile.default_vss()),
            proposed,
            unconstrained: BaselineConfig::unconstrained(scene.num_mics(), scene.error_mic),
            partially_coupled: pc,
            decoupled: dc,
            frost_mu: crate::baselines::DEFAULT_FROST_MU,
        }
    }
}

pub fn run_system(kind: ControllerKind, scene: &RenderedScene, s: &SystemSettings) -> Result<SystemRun> {
    let lc = loop_config(scene, &s.proposed, s.vss);
    match kind {
        ControllerKind::ProposedOptimal => {
            let (c, sol) = solve_proposed(scene, &s.proposed)?;
            let trace = fixed_filter_trace(scene, c.channel_mics(), &sol.w_opt)?;
            Ok(SystemRun { trace, constraint: Some(c), solution: Some(sol) })
        }
        ControllerKind::ProposedAdaptive => {
            let (c, trace) = run_proposed_adaptive(scene, &s.proposed, s.vss)?;
            Ok(SystemRun { trace, constraint: Some(c), solution: None })
        }
        ControllerKind::Unconstrained => Ok(SystemRun { trace: run_baseline(scene, &s.unconstrained, &lc, s.frost_mu)?, constraint: None, solution: None }),
        ControllerKind::PartiallyCoupled => {
            Ok(SystemRun { trace: run_baseline(scene, &s.partially_coupled, &lc, s.frost_mu)?, constraint: None, solution: None })
        }
        ControllerKind::Decoupled => Ok(SystemRun { trace: run_baseline(scene, &s.decoupled, &lc, s.frost_mu)?, constraint: None, solution: None }),
    }
}

/// Metrics of one run over the evaluation window.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub window: Range<usize>,
    pub nr: Db,
    /// `None` when the scene has no desired component.
    pub sdi: Option<Db>,
    pub sdi_highpassed: Option<Db>,
    /// `E{y²}/E{d²}`.
    pub drive_energy: Db,
    pub snr_in: Db,
    pub snr_out: Db,
    pub recomposition_error: f64,
    /// Lag of the residual desired component relative to `s` (samples).
    pub desired_lag: Option<isize>,
    pub bands: Vec<BandNr>,
    pub components: ComponentDecomposition,
}

/// Lag search range for the latency check, 20 ms.
fn max_lag(fs: f64) -> usize {
    (0.02 * fs).round() as usize
}

pub fn evaluate(trace: &SimulationTrace, scene: &RenderedScene, eval: &EvalConfig) -> Result<Evaluation> {
    let n = trace.len();
    if n == 0 {
        return Err(AncError::InsufficientData("empty trace".into()));
    }
    let window = tail_window(n, eval.window_fraction);
    let comps = decouple_components(trace, scene)?;
    let s = &scene.s()[..n];
    let v = &scene.v()[..n];
    let has_desired = mean_square(&s[window.clone()]) > 0.0;
    let has_noise = mean_square(&v[window.clone()]) > 0.0;
    let sdi_full = if has_desired { Some(sdi(s, &comps.e_s, window.clone(), None, scene.fs)?) } else { None };
    let sdi_hp = match (has_desired, eval.sdi_highpass_hz) {
        (true, Some(fc)) => Some(sdi(s, &comps.e_s, window.clone(), Some(fc), scene.fs)?),
        _ => None,
    };
    let nr = if has_noise { noise_reduction(v, &comps.v_anc, window.clone())? } else { Db { value: 0.0, flag: crate::metrics::DbFlag::None } };
    let bands = if has_noise { band_nr(v, &comps.v_anc, &eval.bands, scene.fs, window.clone())? } else { Vec::new() };
    let desired_lag = if has_desired { Some(estimate_lag(s, &comps.e_s, window.clone(), max_lag(scene.fs))?) } else { None };
    Ok(Evaluation {
        nr,
        sdi: sdi_full,
        sdi_highpassed: sdi_hp,
        drive_energy: ratio_db(mean_square(&trace.y[window.clone()]), mean_square(&trace.d[window.clone()])),
        snr_in: snr_db(s, v, window.clone())?,
        snr_out: snr_db(&comps.e_s, &comps.v_anc, window.clone())?,
        recomposition_error: comps.recomposition_error_in(&trace.e, window.clone()),
        desired_lag,
        bands,
        window,
        components: comps,
    })
}

/// Spectra of the main signals over `window` as CSV text.
pub fn spectra_csv(trace: &SimulationTrace, scene: &RenderedScene, comps: &ComponentDecomposition, window: Range<usize>) -> Result<String> {
    let nfft = 1024.min(window.len().next_power_of_two() / 2).max(16);
    let n = trace.len();
    let series: [(&str, &[f64]); 6] = [
        ("d", &trace.d),
        ("e", &trace.e),
        ("s", &scene.s()[..n]),
        ("e_s", &comps.e_s),
        ("v", &scene.v()[..n]),
        ("v_anc", &comps.v_anc),
    ];
    let spectra = series
        .iter()
        .map(|(_, x)| welch_psd_slice(&x[window.clone()], scene.fs, nfft))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("frequency_hz");
    for (name, _) in &series {
        out.push_str(&format!(",{name}_db"));
    }
    out.push('\n');
    for (i, f) in spectra[0].freqs_hz.iter().enumerate() {
        out.push_str(&format!("{f:.3}"));
        for sp in &spectra {
            out.push_str(&format!(",{:.6}", 10.0 * sp.psd[i].max(1e-30).log10()));
        }
        out.push('\n');
    }
    Ok(out)
}
