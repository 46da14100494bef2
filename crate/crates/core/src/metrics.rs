//! Evaluation metrics and component decoupling.

use serde::Serialize;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::adaptive::{DelayLine, Injection, LoopLayout, SimulationTrace};
use crate::dsp::filter::filter_slice;
use crate::dsp::signal::mean_square;
use crate::dsp::ZeroPhaseBand;
use crate::error::{AncError, Result};
use crate::scene::RenderedScene;

/// Magnitude limit for reported decibel values.
pub const DB_LIMIT: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DbFlag {
    None,
    /// Clipped at `+DB_LIMIT`.
    Capped,
    /// Clipped at `-DB_LIMIT`.
    Floored,
}

impl DbFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            DbFlag::None => "",
            DbFlag::Capped => "capped",
            DbFlag::Floored => "floored",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Db {
    pub value: f64,
    pub flag: DbFlag,
}

/// `10·log10(num/den)` clipped to `±DB_LIMIT`.
pub fn ratio_db(num: f64, den: f64) -> Db {
    let v = 10.0 * (num / den).log10();
    if v.is_nan() {
        Db { value: 0.0, flag: DbFlag::None }
    } else if v > DB_LIMIT {
        Db { value: DB_LIMIT, flag: DbFlag::Capped }
    } else if v < -DB_LIMIT {
        Db { value: -DB_LIMIT, flag: DbFlag::Floored }
    } else {
        Db { value: v, flag: DbFlag::None }
    }
}

/// The last `fraction` of a record of `len` samples.
pub fn tail_window(len: usize, fraction: f64) -> Range<usize> {
    let start = ((1.0 - fraction.clamp(0.0, 1.0)) * len as f64).floor() as usize;
    start.min(len)..len
}

/// Default evaluation window: the last quarter.
pub fn default_window(len: usize) -> Range<usize> {
    tail_window(len, 0.25)
}

fn check_window(window: &Range<usize>, lens: &[usize]) -> Result<()> {
    if window.start >= window.end {
        return Err(AncError::InvalidDimension(format!("empty window {window:?}")));
    }
    if let Some(&l) = lens.iter().find(|&&l| l < window.end) {
        return Err(AncError::InvalidDimension(format!("window {window:?} exceeds a signal of {l} samples")));
    }
    Ok(())
}

/// `NR = 10 log10(E{v²}/E{v_anc²})`.
pub fn noise_reduction(v: &[f64], v_anc: &[f64], window: Range<usize>) -> Result<Db> {
    if v.len() != v_anc.len() {
        return Err(AncError::InvalidDimension("noise components differ in length".into()));
    }
    check_window(&window, &[v.len()])?;
    Ok(ratio_db(mean_square(&v[window.clone()]), mean_square(&v_anc[window])))
}

/// `SDI = 10 log10(E{(s−e_s)²}/E{s²})`, optionally after an identical zero-phase
/// high-pass at `highpass_hz` on both signals.
pub fn sdi(s: &[f64], e_s: &[f64], window: Range<usize>, highpass_hz: Option<f64>, fs: f64) -> Result<Db> {
    if s.len() != e_s.len() {
        return Err(AncError::InvalidDimension("desired components differ in length".into()));
    }
    check_window(&window, &[s.len()])?;
    let diff: Vec<f64> = s.iter().zip(e_s).map(|(a, b)| a - b).collect();
    let (s, diff) = match highpass_hz {
        Some(fc) => {
            let hp = ZeroPhaseBand::highpass(fc, fs)?;
            (hp.apply(s), hp.apply(&diff))
        }
        None => (s.to_vec(), diff),
    };
    let ps = mean_square(&s[window.clone()]);
    if ps <= 0.0 {
        return Err(AncError::UndefinedMetric("SDI undefined: desired component has zero power".into()));
    }
    Ok(ratio_db(mean_square(&diff[window]), ps))
}

/// `E{y²}/E{y_ref²}` in percent.
pub fn relative_energy(y: &[f64], y_ref: &[f64], window: Range<usize>) -> Result<f64> {
    check_window(&window, &[y.len(), y_ref.len()])?;
    let r = mean_square(&y_ref[window.clone()]);
    if r <= 0.0 {
        return Err(AncError::UndefinedMetric("relative energy undefined: reference drive is silent".into()));
    }
    Ok(100.0 * mean_square(&y[window]) / r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandNr {
    pub lo: f64,
    pub hi: f64,
    /// `None` when the band carries no noise energy.
    pub nr: Option<Db>,
}

/// NR per band after an identical zero-phase band-pass on both components.
pub fn band_nr(v: &[f64], v_anc: &[f64], bands: &[(f64, f64)], fs: f64, window: Range<usize>) -> Result<Vec<BandNr>> {
    if v.len() != v_anc.len() {
        return Err(AncError::InvalidDimension("noise components differ in length".into()));
    }
    check_window(&window, &[v.len()])?;
    bands
        .iter()
        .map(|&(lo, hi)| {
            let band = ZeroPhaseBand::new(lo, hi, fs)?;
            let pv = mean_square(&band.apply(v)[window.clone()]);
            let pa = mean_square(&band.apply(v_anc)[window.clone()]);
            let defined = pv > 1e-30 * (1.0 + mean_square(&v[window.clone()]));
            Ok(BandNr { lo, hi, nr: defined.then(|| ratio_db(pv, pa)) })
        })
        .collect()
}

/// `10 log10(E{s²}/E{v²})`.
pub fn snr_db(s: &[f64], v: &[f64], window: Range<usize>) -> Result<Db> {
    check_window(&window, &[s.len(), v.len()])?;
    Ok(ratio_db(mean_square(&s[window.clone()]), mean_square(&v[window])))
}

/// Lag in `[-max_lag, max_lag]` maximising `Σ y(n) s(n − lag)` over `window`.
pub fn estimate_lag(s: &[f64], y: &[f64], window: Range<usize>, max_lag: usize) -> Result<isize> {
    check_window(&window, &[s.len(), y.len()])?;
    let max_lag = max_lag as isize;
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let c: f64 = window
            .clone()
            .filter_map(|n| {
                let m = n as isize - lag;
                (m >= 0 && (m as usize) < s.len()).then(|| y[n] * s[m as usize])
            })
            .sum();
        if c > best.1 {
            best = (lag, c);
        }
    }
    Ok(best.0)
}

/// Residual desired and noise components at the error microphone, `e = e_s + v_anc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDecomposition {
    pub e_s: Vec<f64>,
    pub v_anc: Vec<f64>,
    /// Loudspeaker drive caused by each component.
    pub y_s: Vec<f64>,
    pub y_v: Vec<f64>,
}

impl ComponentDecomposition {
    /// `‖e_s + v_anc − e‖ / ‖e‖`.
    pub fn recomposition_error(&self, e: &[f64]) -> f64 {
        let num: f64 = self.e_s.iter().zip(&self.v_anc).zip(e).map(|((a, b), c)| (a + b - c).powi(2)).sum();
        let den: f64 = e.iter().map(|v| v * v).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// [`recomposition_error`](Self::recomposition_error) restricted to `window`.
    pub fn recomposition_error_in(&self, e: &[f64], window: Range<usize>) -> f64 {
        let w = window.start.min(e.len())..window.end.min(e.len());
        ComponentDecomposition {
            e_s: self.e_s[w.clone()].to_vec(),
            v_anc: self.v_anc[w.clone()].to_vec(),
            y_s: Vec::new(),
            y_v: Vec::new(),
        }
        .recomposition_error(&e[w])
    }
}

/// Desired and noise components of a run. Uses the per-sample decomposition recorded in
/// the loop when present, otherwise replays the filter snapshots.
pub fn decouple_components(trace: &SimulationTrace, scene: &RenderedScene) -> Result<ComponentDecomposition> {
    if let Some(c) = trace.components.as_ref().filter(|c| c.e_s.len() == trace.len()) {
        return Ok(c.clone());
    }
    let (e_s, y_s) = replay_component(trace, &scene.desired)?;
    let (v_anc, y_v) = replay_component(trace, &scene.noise)?;
    Ok(ComponentDecomposition { e_s, v_anc, y_s, y_v })
}

/// Error-mic residual and drive for one component under the recorded snapshots.
pub fn replay_component(trace: &SimulationTrace, comp: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_total = trace.len();
    if trace.snapshots.is_empty() && n_total > 0 {
        return Err(AncError::InsufficientData("trace has no filter snapshots".into()));
    }
    let covered = trace.snapshots.last().map_or(0, |s| s.end);
    if covered < n_total {
        return Err(AncError::InsufficientData(format!("snapshots cover {covered} of {n_total} samples")));
    }
    let lay = &trace.layout;
    check_component(lay, comp, n_total)?;
    let mut shadow = ComponentFilter::new(lay);
    for snap in &trace.snapshots {
        for n in snap.start..snap.end.min(n_total) {
            shadow.push(comp, n, &snap.anc, snap.extractor.as_deref());
        }
    }
    Ok(shadow.finish(lay, comp))
}

fn check_component(lay: &LoopLayout, comp: &[Vec<f64>], n_total: usize) -> Result<()> {
    let ex_mics = lay.extractor.as_ref().map_or(&[][..], |ex| &ex.mics[..]);
    if let Some(&bad) = lay.channel_mics.iter().chain(ex_mics).find(|&&m| m >= comp.len()) {
        return Err(AncError::InvalidDimension(format!("component has no microphone {bad}")));
    }
    if comp.iter().any(|c| c.len() < n_total) {
        return Err(AncError::InvalidDimension("component shorter than the trace".into()));
    }
    Ok(())
}

/// Filters one signal component through the loop's (time-varying) filters, one sample
/// at a time. Linear in the component, so the outputs for complementary components sum
/// to those of the full signal.
#[derive(Debug, Clone)]
pub struct ComponentFilter {
    mics: Vec<usize>,
    ex_mics: Vec<usize>,
    lines: Vec<DelayLine>,
    ex_lines: Vec<DelayLine>,
    y: Vec<f64>,
    extracted: Vec<f64>,
}

impl ComponentFilter {
    pub fn new(lay: &LoopLayout) -> Self {
        let (ex_n, ex_l) = lay.extractor.as_ref().map_or((0, 1), |ex| (ex.mics.len(), ex.filter_len));
        ComponentFilter {
            mics: lay.channel_mics.clone(),
            ex_mics: lay.extractor.as_ref().map_or_else(Vec::new, |ex| ex.mics.clone()),
            lines: vec![DelayLine::new(lay.filter_len); lay.channel_mics.len()],
            ex_lines: vec![DelayLine::new(ex_l); ex_n],
            y: Vec::new(),
            extracted: Vec::new(),
        }
    }

    /// Sample `n` under control filter `anc` and extractor filter `extractor`.
    pub fn push(&mut self, comp: &[Vec<f64>], n: usize, anc: &[f64], extractor: Option<&[f64]>) {
        let l = self.lines[0].len();
        let mut acc = 0.0;
        for (ch, line) in self.lines.iter_mut().enumerate() {
            line.push(comp[self.mics[ch]][n]);
            acc += anc[ch * l..(ch + 1) * l].iter().zip(line.view()).map(|(a, b)| a * b).sum::<f64>();
        }
        self.y.push(acc);
        if !self.ex_lines.is_empty() {
            let lb = self.ex_lines[0].len();
            let mut out = 0.0;
            for (j, line) in self.ex_lines.iter_mut().enumerate() {
                line.push(comp[self.ex_mics[j]][n]);
                if let Some(wex) = extractor {
                    out += wex[j * lb..(j + 1) * lb].iter().zip(line.view()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            self.extracted.push(out);
        }
    }

    /// Residual at the error microphone and loudspeaker drive.
    pub fn finish(mut self, lay: &LoopLayout, comp: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n_total = self.y.len();
        if let Some(ex) = &lay.extractor {
            if let Injection::SecondaryDrive { pre_delay } = ex.injection {
                for n in pre_delay..n_total.min(self.extracted.len() + pre_delay) {
                    self.y[n] += ex.gain * self.extracted[n - pre_delay];
                }
            }
        }
        let gy = filter_slice(&lay.secondary, &self.y);
        let e = comp[lay.error_mic][..n_total].iter().zip(&gy).map(|(a, b)| a + b).collect();
        (e, self.y)
    }
}

/// Trace of a time-invariant filter `w` (one snapshot over the whole record), e.g. an
/// optimal solution evaluated in the loop.
pub fn fixed_filter_trace(scene: &RenderedScene, channel_mics: &[usize], w: &[f64]) -> Result<SimulationTrace> {
    let n = scene.len();
    let l = scene.filter_len;
    if w.len() != channel_mics.len() * l {
        return Err(AncError::InvalidDimension(format!("{} weights for {} channels of {l} taps", w.len(), channel_mics.len())));
    }
    if channel_mics.last() != Some(&scene.error_mic) {
        return Err(AncError::Configuration("the last channel must be the error microphone".into()));
    }
    let mut trace = SimulationTrace {
        fs: scene.fs,
        e: vec![0.0; n],
        y: vec![0.0; n],
        d: scene.d(),
        mu: vec![0.0],
        hop: n.max(1),
        snapshots: vec![crate::adaptive::Snapshot { start: 0, end: n, anc: w.to_vec(), extractor: None }],
        layout: crate::adaptive::LoopLayout {
            channel_mics: channel_mics.to_vec(),
            error_mic: scene.error_mic,
            filter_len: l,
            secondary: scene.secondary.taps().to_vec(),
            extractor: None,
        },
        divergence: None,
        components: None,
    };
    let mics: Vec<Vec<f64>> = (0..scene.num_mics()).map(|m| scene.mic_signal(m)).collect();
    let (e, y) = replay_component(&trace, &mics)?;
    trace.e = e;
    trace.y = y;
    Ok(trace)
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub metric: String,
    pub band_lo: Option<f64>,
    pub band_hi: Option<f64>,
    pub value_db: Option<f64>,
    pub window_start: usize,
    pub window_end: usize,
    pub flags: String,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRow {
    pub fn new(scenario_id: &str, metric: &str, value: Option<Db>, window: &Range<usize>) -> Self {
        MetricRow {
            scenario_id: scenario_id.to_string(),
            metric: metric.to_string(),
            band_lo: None,
            band_hi: None,
            value_db: value.map(|v| v.value),
            window_start: window.start,
            window_end: window.end,
            flags: match value {
                Some(v) => v.flag.as_str().to_string(),
                None => "undefined".to_string(),
            },
            seed: 0,
            config_hash: String::new(),
        }
    }

    pub fn with_band(mut self, lo: f64, hi: f64) -> Self {
        self.band_lo = Some(lo);
        self.band_hi = Some(hi);
        self
    }

    pub fn with_provenance(mut self, seed: u64, config_hash: &str) -> Self {
        self.seed = seed;
        self.config_hash = config_hash.to_string();
        self
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const METRICS_CSV_HEADER: &str = "scenario_id,metric,band_lo,band_hi,value_db,window_start,window_end,flags,seed,config_hash";

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scenario_id,
            r.metric,
            opt(r.band_lo),
            opt(r.band_hi),
            opt(r.value_db),
            r.window_start,
            r.window_end,
            r.flags,
            r.seed,
            r.config_hash
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{gen_signal, SignalKind};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        gen_signal(SignalKind::White, n, seed, 8000.0).unwrap().into_samples()
    }

    #[test]
    fn nr_examples() {
        let v = noise(1000, 1);
        assert_eq!(noise_reduction(&v, &v, 0..1000).unwrap().value, 0.0);
        let tenth: Vec<f64> = v.iter().map(|x| x / 10.0).collect();
        assert!((noise_reduction(&v, &tenth, 0..1000).unwrap().value - 20.0).abs() < 1e-9);
        let zero = vec![0.0; 1000];
        let capped = noise_reduction(&v, &zero, 0..1000).unwrap();
        assert_eq!((capped.value, capped.flag), (DB_LIMIT, DbFlag::Capped));
    }

    #[test]
    fn sdi_examples() {
        let s = noise(1000, 2);
        let floor = sdi(&s, &s, 0..1000, None, 8000.0).unwrap();
        assert_eq!((floor.value, floor.flag), (-DB_LIMIT, DbFlag::Floored));
        assert!(sdi(&s, &vec![0.0; 1000], 0..1000, None, 8000.0).unwrap().value.abs() < 1e-12);
        let scaled: Vec<f64> = s.iter().map(|x| 0.9 * x).collect();
        assert!((sdi(&s, &scaled, 0..1000, None, 8000.0).unwrap().value + 20.0).abs() < 1e-9);
        assert!(matches!(sdi(&[0.0; 10], &[0.0; 10], 0..10, None, 8000.0), Err(AncError::UndefinedMetric(_))));
    }

    #[test]
    fn energy_examples() {
        let y = noise(100, 3);
        assert!((relative_energy(&y, &y, 0..100).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(relative_energy(&[0.0; 100], &y, 0..100).unwrap(), 0.0);
        assert!(relative_energy(&y, &[0.0; 100], 0..100).is_err());
    }

    #[test]
    fn band_nr_flags_silent_band() {
        let tone = gen_signal(SignalKind::Tone { freq_hz: 1000.0 }, 8000, 0, 8000.0).unwrap().into_samples();
        let half: Vec<f64> = tone.iter().map(|x| x / 2.0).collect();
        let out = band_nr(&tone, &half, &[(800.0, 1200.0)], 8000.0, 2000..6000).unwrap();
        assert!((out[0].nr.unwrap().value - 6.0206).abs() < 0.01);
        let silent = band_nr(&vec![0.0; 8000], &vec![0.0; 8000], &[(100.0, 200.0)], 8000.0, 0..8000).unwrap();
        assert!(silent[0].nr.is_none());
    }

    #[test]
    fn lag_of_delayed_copy() {
        let s = noise(4000, 4);
        let mut y = vec![0.0; 4000];
        y[7..].copy_from_slice(&s[..3993]);
        assert_eq!(estimate_lag(&s, &y, 100..4000, 20).unwrap(), 7);
        assert_eq!(estimate_lag(&s, &s, 100..4000, 20).unwrap(), 0);
    }

    #[test]
    fn tail_window_is_last_quarter() {
        assert_eq!(default_window(100), 75..100);
        assert!(noise_reduction(&[1.0; 4], &[1.0; 4], 3..9).is_err());
    }

    #[test]
    fn csv_has_header_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricRow::new("a", "nr", Some(Db { value: 3.0, flag: DbFlag::None }), &(0..10)).with_provenance(7, "abc"),
            MetricRow::new("a", "band_nr", None, &(0..10)).with_band(100.0, 200.0),
        ];
        write_metrics_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[1], "a,nr,,,3.000000,0,10,,7,abc");
        assert!(lines[2].contains("undefined"));
    }
}
