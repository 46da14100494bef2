//! The four experiment commands. Each writes CSV files into an output directory and
//! returns `Err(Diverged)` after writing if any simulated run diverged.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::spec::{config_hash, reseed, ControllerKind, ExperimentSpec, Profile, Sweep};
use super::{evaluate, level_normalized, run_system, solve_proposed, spectra_csv, Evaluation, SystemRun, SystemSettings};
use crate::baselines::BaselineConfig;
use crate::constraint::constraint_residual;
use crate::error::{AncError, DivergenceReport, Result};
use crate::metrics::{ratio_db, tail_window, write_metrics_csv, Db, MetricRow};
use crate::optimal::RegularizationRule;
use crate::dsp::SignalKind;
use crate::scene::{render, RenderedScene, SceneConfig, SensorNoiseSpec, SourceSpec};

const DEFAULT_DOA_GRID: [f64; 12] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0, 210.0, 240.0, 270.0, 300.0, 330.0];
const DEFAULT_SSNR_GRID: [f64; 5] = [-30.0, -15.0, 0.0, 15.0, 30.0];
const DEFAULT_SNR_GRID: [f64; 6] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0];

/// Command-line level options shared by all commands.
#[derive(Debug, Clone)]
pub struct CommandOptions {
    pub out_dir: PathBuf,
    pub profile: Profile,
    /// Overrides the experiment's seed list.
    pub seed: Option<u64>,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct CommandReport {
    pub files: Vec<PathBuf>,
    /// Human-readable one-line results.
    pub summary: Vec<String>,
}

/// Scene, seed and hash of one scenario.
#[derive(Debug, Clone, Serialize)]
struct Scenario {
    id: String,
    seed: u64,
    scene: SceneConfig,
}

#[derive(Serialize)]
struct HashInput<'a> {
    spec: &'a ExperimentSpec,
    scene: &'a SceneConfig,
    profile: Profile,
    command: &'a str,
}

struct Context {
    spec: ExperimentSpec,
    profile: Profile,
    base: SceneConfig,
    seeds: Vec<Option<u64>>,
}

impl Context {
    fn new(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<Self> {
        spec.validate()?;
        let base = spec.resolve_scene(opts.profile)?;
        base.to_scene()?;
        let seeds = match (opts.seed, spec.seeds.is_empty()) {
            (Some(s), _) => vec![Some(s)],
            (None, false) => spec.seeds.iter().copied().map(Some).collect(),
            (None, true) => vec![None],
        };
        Ok(Context { spec: spec.clone(), profile: opts.profile, base, seeds })
    }

    fn scenarios(&self, tag: &str, edit: impl Fn(&mut SceneConfig)) -> Vec<Scenario> {
        self.seeds
            .iter()
            .map(|seed| {
                let mut scene = self.base.clone();
                if let Some(s) = seed {
                    reseed(&mut scene, *s);
                }
                edit(&mut scene);
                let seed = scene.desired.seed;
                let id = if self.seeds.len() > 1 { format!("{tag}_s{seed}") } else { tag.to_string() };
                Scenario { id, seed, scene }
            })
            .collect()
    }

    fn hash(&self, scene: &SceneConfig, command: &str) -> String {
        config_hash(&HashInput { spec: &self.spec, scene, profile: self.profile, command })
    }

    fn settings(&self, rendered: &RenderedScene) -> SystemSettings {
        let mut s = SystemSettings::for_scene(rendered, self.spec.proposed.clone(), self.profile);
        let from_scene = |kind| self.base.baseline.clone().filter(|b: &BaselineConfig| b.kind == kind);
        if let Some(pc) = self.spec.partially_coupled.clone().or_else(|| from_scene(crate::baselines::BaselineKind::PartiallyCoupled)) {
            s.partially_coupled = pc;
        }
        if let Some(dc) = self.spec.decoupled.clone().or_else(|| from_scene(crate::baselines::BaselineKind::Decoupled)) {
            s.decoupled = dc;
        }
        s.frost_mu = self.spec.frost_mu;
        s
    }
}

/// Baseline mic split: beamformer on the odd-position references, decoupled ANC on the
/// even-position ones.
pub fn default_baselines(num_mics: usize, error_mic: usize) -> (BaselineConfig, BaselineConfig) {
    let refs: Vec<usize> = (0..num_mics).filter(|&m| m != error_mic).collect();
    let bf: Vec<usize> = refs.iter().copied().skip(1).step_by(2).collect();
    let anc: Vec<usize> = refs.iter().copied().step_by(2).collect();
    (BaselineConfig::partially_coupled(num_mics, error_mic, bf.clone()), BaselineConfig::decoupled(anc, bf))
}

/// Every reference mic except the second one; the last of them serves as the SsNR reference.
pub fn default_sensor_noise_mics(num_mics: usize, error_mic: usize) -> Vec<usize> {
    let refs: Vec<usize> = (0..num_mics).filter(|&m| m != error_mic).collect();
    if refs.len() < 3 {
        return refs;
    }
    refs.iter().enumerate().filter(|&(i, _)| i != 1).map(|(_, &m)| m).collect()
}

/// Metric rows, written files, divergence and summary line of one scenario.
type ScenarioOutput = (Vec<MetricRow>, Vec<PathBuf>, Option<DivergenceReport>, String);

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| AncError::Configuration(format!("thread pool: {e}")))
}

fn render_scenario(s: &Scenario) -> Result<RenderedScene> {
    render(&s.scene.to_scene()?, s.scene.duration_samples())
}

fn db_cell(v: Option<Db>) -> String {
    v.map_or(String::new(), |d| format!("{:.4}", d.value))
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn first_divergence(found: impl IntoIterator<Item = Option<DivergenceReport>>) -> Result<()> {
    match found.into_iter().flatten().next() {
        Some(r) => Err(AncError::Diverged(Box::new(r))),
        None => Ok(()),
    }
}

fn metric_rows(id: &str, ev: &Evaluation, seed: u64, hash: &str) -> Vec<MetricRow> {
    let w = &ev.window;
    let lin = |v: f64| Some(Db { value: 20.0 * v.max(1e-300).log10(), flag: crate::metrics::DbFlag::None });
    let mut rows = vec![
        MetricRow::new(id, "nr", Some(ev.nr), w),
        MetricRow::new(id, "sdi", ev.sdi, w),
        MetricRow::new(id, "sdi_highpassed", ev.sdi_highpassed, w),
        MetricRow::new(id, "drive_energy", Some(ev.drive_energy), w),
        MetricRow::new(id, "snr_in", Some(ev.snr_in), w),
        MetricRow::new(id, "snr_out", Some(ev.snr_out), w),
        MetricRow::new(id, "recomposition_error", lin(ev.recomposition_error), w),
    ];
    if let Some(lag) = ev.desired_lag {
        let mut r = MetricRow::new(id, "desired_lag_samples", None, w);
        r.value_db = Some(lag as f64);
        rows.push(r);
    }
    for b in &ev.bands {
        rows.push(MetricRow::new(id, "nr_band", b.nr, w).with_band(b.lo, b.hi));
    }
    rows.into_iter().map(|r| r.with_provenance(seed, hash)).collect()
}

fn divergence_row(id: &str, r: &DivergenceReport, seed: u64, hash: &str) -> MetricRow {
    let mut row = MetricRow::new(id, "diverged", None, &(r.sample..r.sample));
    row.flags = format!("diverged_at_{}", r.sample);
    row.with_provenance(seed, hash)
}

/// Runs the configured controller on every seed and writes `metrics.csv` plus per-run
/// `trace.csv`, `spectra.csv` and snapshot files.
pub fn cmd_run(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<CommandReport> {
    let ctx = Context::new(spec, opts)?;
    if spec.sweep != Sweep::None {
        log::warn!("run ignores the sweep section; use directivity, robustness or compare");
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let kind = spec.controller;
    let scenarios = ctx.scenarios(kind.as_str(), |_| {});
    let single = scenarios.len() == 1;
    let results: Vec<Result<ScenarioOutput>> = pool(opts.jobs)?.install(|| {
        scenarios
            .par_iter()
            .map(|sc| {
                let hash = ctx.hash(&sc.scene, "run");
                let dir = if single { opts.out_dir.clone() } else { opts.out_dir.join(&sc.id) };
                std::fs::create_dir_all(&dir)?;
                let rendered = render_scenario(sc)?;
                let settings = ctx.settings(&rendered);
                let run = run_system(kind, &rendered, &settings)?;
                let mut files = vec![dir.join("trace.csv")];
                run.trace.write_csv(&files[0])?;
                run.trace.write_snapshots(&dir)?;
                files.push(dir.join("snapshots.bin"));
                if let Some(r) = &run.trace.divergence {
                    return Ok((vec![divergence_row(&sc.id, r, sc.seed, &hash)], files, Some(r.clone()), format!("{}: diverged", sc.id)));
                }
                let ev = evaluate(&run.trace, &rendered, &spec.eval)?;
                let spectra = dir.join("spectra.csv");
                std::fs::write(&spectra, spectra_csv(&run.trace, &rendered, &ev.components, ev.window.clone())?)?;
                files.push(spectra);
                let mut rows = metric_rows(&sc.id, &ev, sc.seed, &hash);
                if let (Some(sol), Some(c)) = (&run.solution, &run.constraint) {
                    sol.export(&dir)?;
                    files.push(dir.join("w_opt.bin"));
                    let res = constraint_residual(&sol.w_opt, &rendered.secondary, c)?;
                    rows.push(MetricRow::new(&sc.id, "constraint_residual", Some(ratio_db(res * res, 1.0)), &ev.window).with_provenance(sc.seed, &hash));
                }
                let summary = summarize(&sc.id, &ev);
                Ok((rows, files, None, summary))
            })
            .collect()
    });
    let mut report = CommandReport::default();
    let mut rows = Vec::new();
    let mut div = Vec::new();
    for r in results {
        let (r_rows, files, d, line) = r?;
        rows.extend(r_rows);
        report.files.extend(files);
        report.summary.push(line);
        div.push(d);
    }
    let metrics = opts.out_dir.join("metrics.csv");
    write_metrics_csv(&metrics, &rows)?;
    report.files.push(metrics);
    first_divergence(div)?;
    Ok(report)
}

fn summarize(id: &str, ev: &Evaluation) -> String {
    let mut s = format!("{id}: NR {:.2} dB", ev.nr.value);
    if let Some(v) = ev.sdi {
        let _ = write!(s, ", SDI {:.2} dB", v.value);
    }
    if let Some(v) = ev.sdi_highpassed {
        let _ = write!(s, ", SDI(hp) {:.2} dB", v.value);
    }
    let _ = write!(s, ", E{{y2}}/E{{d2}} {:.2} dB, recomposition {:.3e}", ev.drive_energy.value, ev.recomposition_error);
    s
}

/// Noise-reduction versus noise direction, broadband and per band, into `directivity.csv`.
pub fn cmd_directivity(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<CommandReport> {
    let ctx = Context::new(spec, opts)?;
    let angles: Vec<f64> = match &spec.sweep {
        Sweep::Doa { values } => values.clone(),
        Sweep::None => DEFAULT_DOA_GRID.to_vec(),
        other => return Err(AncError::Configuration(format!("directivity sweeps the noise direction, not {other:?}"))),
    };
    std::fs::create_dir_all(&opts.out_dir)?;
    let points: Vec<(f64, Scenario)> = angles
        .iter()
        .flat_map(|&a| {
            ctx.scenarios(&format!("doa{a}"), move |s| {
                if s.noises.is_empty() {
                    s.noises.push(SourceSpec::generated(a, SignalKind::Pink, s.desired.seed.wrapping_add(1)));
                }
                s.noises.iter_mut().for_each(|n| n.doa_deg = a);
            })
            .into_iter()
            .map(move |sc| (a, sc))
        })
        .collect();
    let results: Vec<Result<(Vec<String>, Option<DivergenceReport>)>> = pool(opts.jobs)?.install(|| {
        points
            .par_iter()
            .map(|(angle, sc)| {
                let hash = ctx.hash(&sc.scene, "directivity");
                let rendered = render_scenario(sc)?;
                let run = run_system(spec.controller, &rendered, &ctx.settings(&rendered))?;
                if let Some(r) = run.trace.divergence {
                    let row = format!("{angle},,,,diverged_at_{},{},{hash}", r.sample, sc.seed);
                    return Ok((vec![row], Some(r)));
                }
                let ev = evaluate(&run.trace, &rendered, &spec.eval)?;
                let mut rows = vec![format!("{angle},,,{},{},{},{hash}", db_cell(Some(ev.nr)), ev.nr.flag.as_str(), sc.seed)];
                for b in &ev.bands {
                    let flag = b.nr.map_or("undefined", |d| d.flag.as_str());
                    rows.push(format!("{angle},{},{},{},{flag},{},{hash}", b.lo, b.hi, db_cell(b.nr), sc.seed));
                }
                Ok((rows, None))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut div = Vec::new();
    let mut report = CommandReport::default();
    for ((angle, _), r) in points.iter().zip(results) {
        let (r_rows, d) = r?;
        if let Some(first) = r_rows.first() {
            report.summary.push(format!("noise at {angle} deg: NR {}", first.split(',').nth(3).unwrap_or("")));
        }
        rows.extend(r_rows);
        div.push(d);
    }
    let path = opts.out_dir.join("directivity.csv");
    write_csv(&path, "angle_deg,band_lo,band_hi,nr_db,flags,seed,config_hash", &rows)?;
    report.files.push(path);
    first_divergence(div)?;
    Ok(report)
}

/// Optimal-solution NR and SDI versus sensor SNR for the eigenvalue-relative and the
/// noise-matched regularization rules, into `robustness.csv`.
pub fn cmd_robustness(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<CommandReport> {
    let ctx = Context::new(spec, opts)?;
    let ssnrs: Vec<f64> = match &spec.sweep {
        Sweep::Ssnr { values } => values.clone(),
        Sweep::None => DEFAULT_SSNR_GRID.to_vec(),
        other => return Err(AncError::Configuration(format!("robustness sweeps the sensor SNR, not {other:?}"))),
    };
    std::fs::create_dir_all(&opts.out_dir)?;
    let eigen_ratio = match spec.proposed.regularization {
        RegularizationRule::Eigen { ratio } => ratio,
        _ => 1e4,
    };
    let mut rules: Vec<(String, RegularizationRule)> = vec![
        ("eigen".into(), RegularizationRule::Eigen { ratio: eigen_ratio }),
        ("sensor_noise".into(), RegularizationRule::SensorNoise { factor: spec.sensor_noise_factor }),
    ];
    rules.extend(spec.ratio_grid.iter().map(|&r| (format!("eigen_grid_{r:e}"), RegularizationRule::Eigen { ratio: r })));

    let base_geom = ctx.base.to_scene()?.geometry;
    let err = base_geom.error_mic_index;
    let placement = |s: &SceneConfig| -> (Vec<usize>, usize) {
        if let Some(sn) = &s.sensor_noise {
            return (sn.affected.clone(), sn.reference_mic);
        }
        let affected = spec.sensor_noise_mics.clone().unwrap_or_else(|| default_sensor_noise_mics(base_geom.num_mics(), err));
        let reference = *affected.last().unwrap_or(&0);
        (affected, reference)
    };
    let points: Vec<(f64, Scenario)> = ssnrs
        .iter()
        .flat_map(|&ssnr| {
            ctx.scenarios(&format!("ssnr{ssnr}"), |s| {
                let (affected, reference_mic) = placement(s);
                let seed = s.desired.seed.wrapping_add(0x5EED);
                s.sensor_noise = Some(SensorNoiseSpec { ssnr_db: ssnr, affected, reference_mic, seed });
            })
            .into_iter()
            .map(move |sc| (ssnr, sc))
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..rules.len()).map(move |r| (p, r))).collect();
    let results: Vec<Result<String>> = pool(opts.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(p, r)| {
                let (ssnr, sc) = &points[p];
                let (name, rule) = &rules[r];
                let hash = ctx.hash(&sc.scene, "robustness");
                let rendered = render_scenario(sc)?;
                let mut cfg = spec.proposed.clone();
                cfg.regularization = *rule;
                let (c, sol) = solve_proposed(&rendered, &cfg)?;
                let trace = crate::metrics::fixed_filter_trace(&rendered, c.channel_mics(), &sol.w_opt)?;
                let ev = evaluate(&trace, &rendered, &spec.eval)?;
                Ok(format!(
                    "{ssnr},{name},{:e},{:e},{},{},{},{},{hash}",
                    sol.beta,
                    sol.rho,
                    db_cell(Some(ev.nr)),
                    db_cell(ev.sdi),
                    db_cell(ev.sdi_highpassed),
                    sc.seed
                ))
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut report = CommandReport::default();
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        report.summary.push(format!("SsNR {} dB, {}: NR {} dB, SDI {} dB", f[0], f[1], f[4], f[5]));
    }
    let path = opts.out_dir.join("robustness.csv");
    write_csv(&path, "ssnr_db,rule,beta,rho,nr_db,sdi_db,sdi_highpassed_db,seed,config_hash", &rows)?;
    report.files.push(path);
    Ok(report)
}

/// The proposed system against the two hear-through baselines over input SNR, into
/// `compare.csv`. Energy is relative to the partially coupled system's drive.
pub fn cmd_compare(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<CommandReport> {
    let ctx = Context::new(spec, opts)?;
    let snrs: Vec<f64> = match &spec.sweep {
        Sweep::Snr { values } => values.clone(),
        Sweep::None => DEFAULT_SNR_GRID.to_vec(),
        other => return Err(AncError::Configuration(format!("compare sweeps the input SNR, not {other:?}"))),
    };
    std::fs::create_dir_all(&opts.out_dir)?;
    let proposed = match spec.controller {
        k @ (ControllerKind::ProposedOptimal | ControllerKind::ProposedAdaptive) => k,
        _ => ControllerKind::ProposedAdaptive,
    };
    let systems = [proposed, ControllerKind::PartiallyCoupled, ControllerKind::Decoupled];
    let points: Vec<(f64, Scenario)> = snrs
        .iter()
        .flat_map(|&snr| ctx.scenarios(&format!("snr{snr}"), move |s| s.snr_db = Some(snr)).into_iter().map(move |sc| (snr, sc)))
        .collect();
    let rendered: Vec<RenderedScene> = points.iter().map(|(_, sc)| render_scenario(sc).map(|r| level_normalized(&r))).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..systems.len()).map(move |s| (p, s))).collect();
    let runs: Vec<Result<SystemRun>> =
        pool(opts.jobs)?.install(|| jobs.par_iter().map(|&(p, s)| run_system(systems[s], &rendered[p], &ctx.settings(&rendered[p]))).collect());
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut div = Vec::new();
    let mut report = CommandReport::default();
    for (p, (snr, sc)) in points.iter().enumerate() {
        let hash = ctx.hash(&sc.scene, "compare");
        let group = &runs[p * systems.len()..(p + 1) * systems.len()];
        let reference = &group[1].trace;
        for (sys, run) in systems.iter().zip(group) {
            let name = sys.as_str();
            if let Some(r) = &run.trace.divergence {
                rows.push(format!("{snr},{name},,,,,,diverged_at_{},{},{hash}", r.sample, sc.seed));
                div.push(Some(r.clone()));
                continue;
            }
            let ev = evaluate(&run.trace, &rendered[p], &spec.eval)?;
            let energy = if reference.divergence.is_none() {
                let w = tail_window(run.trace.len().min(reference.len()), spec.eval.window_fraction);
                crate::metrics::relative_energy(&run.trace.y, &reference.y, w).ok()
            } else {
                None
            };
            let lag = ev.desired_lag.map_or(String::new(), |l| l.to_string());
            report.summary.push(format!(
                "SNR {snr} dB, {name}: NR {:.2} dB, SDI {} dB, energy {}%, lag {lag}",
                ev.nr.value,
                db_cell(ev.sdi),
                energy.map_or("-".into(), |e| format!("{e:.1}"))
            ));
            rows.push(format!(
                "{snr},{name},{},{},{},{},{lag},,{},{hash}",
                energy.map_or(String::new(), |e| format!("{e:.4}")),
                db_cell(Some(ev.nr)),
                db_cell(ev.sdi),
                db_cell(ev.sdi_highpassed),
                sc.seed
            ));
        }
    }
    let path = opts.out_dir.join("compare.csv");
    write_csv(&path, "snr_db,system,energy_pct,nr_db,sdi_db,sdi_highpassed_db,lag_samples,flags,seed,config_hash", &rows)?;
    report.files.push(path);
    first_divergence(div)?;
    Ok(report)
}
