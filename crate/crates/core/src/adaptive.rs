//! Sample-by-sample projected hybrid FxLMS controller.
//!
//! Per sample `n` the loop
//! 1. reads `e(n)` from the plant (the secondary path has at least one sample of delay),
//! 2. rebuilds the disturbance `d̂(n) = e(n) − Σ_{m≥1} ĝ_m y(n−m)`,
//! 3. pushes the references and `d̂(n)` into the stacked input `x(n)` and the filtered
//!    reference `r(n) = Ĝᵀx(n)`,
//! 4. emits `y(n) = w(n)ᵀx(n)`,
//! 5. updates `w(n+1) = P[w(n) − μ(n) r(n) e(n)] + q` and the step size.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::constraint::ProjectionPair;
use crate::dsp::signal::mean_square;
use crate::dsp::ImpulseResponse;
use crate::error::{AncError, DivergenceReport, Result};
use crate::io::write_rows_bin;
use crate::metrics::{ComponentDecomposition, ComponentFilter};

/// Fixed-length history, newest sample first.
///
/// Values are written twice into a buffer of length `2·len` so the window is always
/// one contiguous slice.
#[derive(Debug, Clone)]
pub struct DelayLine {
    buf: Vec<f64>,
    head: usize,
    len: usize,
}

impl DelayLine {
    pub fn new(len: usize) -> Self {
        let len = len.max(1);
        DelayLine { buf: vec![0.0; 2 * len], head: 0, len }
    }

    pub fn push(&mut self, v: f64) {
        self.head = if self.head == 0 { self.len - 1 } else { self.head - 1 };
        self.buf[self.head] = v;
        self.buf[self.head + self.len] = v;
    }

    /// `view()[i]` is the sample pushed `i` steps ago.
    pub fn view(&self) -> &[f64] {
        &self.buf[self.head..self.head + self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn clear(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variable step-size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VssParams {
    pub mu_max: f64,
    pub mu_min: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl VssParams {
    /// The published 48 kHz parameter set.
    pub const PAPER: VssParams = VssParams { mu_max: 1e-4, mu_min: 8e-6, alpha: 0.99998, gamma: 1e-5, beta: 0.99999 };

    /// Constant step size.
    pub fn fixed(mu: f64) -> Self {
        VssParams { mu_max: mu, mu_min: mu, alpha: 1.0, gamma: 0.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu_max, self.mu_min, self.alpha, self.gamma, self.beta].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.mu_min > self.mu_max {
            return Err(AncError::Configuration(format!("invalid step-size parameters {self:?}")));
        }
        if self.alpha > 1.0 || self.beta > 1.0 {
            return Err(AncError::Configuration("VSS forgetting factors must not exceed 1".into()));
        }
        Ok(())
    }
}

/// Step-size state. Starts at `μ_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vss {
    pub params: VssParams,
    pub mu: f64,
    pub p: f64,
    e_prev: f64,
}

impl Vss {
    pub fn new(params: VssParams) -> Result<Self> {
        params.validate()?;
        Ok(Vss { params, mu: params.mu_max, p: 0.0, e_prev: 0.0 })
    }
}

/// `p ← βp + (1−β)e(n)e(n−1)`, `μ ← clamp(αμ + γp², μ_min, μ_max)`; returns the new `μ`.
pub fn vss_update(state: &mut Vss, e: f64) -> f64 {
    let VssParams { mu_max, mu_min, alpha, gamma, beta } = state.params;
    state.p = beta * state.p + (1.0 - beta) * e * state.e_prev;
    state.mu = (alpha * state.mu + gamma * state.p * state.p).clamp(mu_min, mu_max);
    state.e_prev = e;
    state.mu
}

/// Error microphone: `e(n) = d(n) + Σ_m g_m y(n−m)`.
#[derive(Debug, Clone)]
pub struct Plant {
    g: Vec<f64>,
    y: DelayLine,
}

impl Plant {
    pub fn new(g: &ImpulseResponse) -> Result<Self> {
        let taps = trimmed(g)?;
        Ok(Plant { y: DelayLine::new(taps.len() - 1), g: taps })
    }

    /// Error sample for disturbance `d` given the drive pushed so far.
    pub fn error(&self, d: f64) -> f64 {
        d + dot(&self.g[1..], self.y.view())
    }

    pub fn push(&mut self, y: f64) {
        self.y.push(y);
    }
}

/// Secondary-path taps up to the last non-zero one; rejects a path without delay.
fn trimmed(g: &ImpulseResponse) -> Result<Vec<f64>> {
    let taps = g.taps();
    if taps.first().is_some_and(|&t| t != 0.0) {
        return Err(AncError::Causality("the secondary path needs at least one sample of delay".into()));
    }
    let last = taps.iter().rposition(|&t| t != 0.0).unwrap_or(1).max(1);
    Ok(taps[..=last].to_vec())
}

/// Hybrid controller state for `K` channels (`K − 1` references plus `d̂`).
#[derive(Debug, Clone)]
pub struct Controller {
    l: usize,
    k: usize,
    g: Vec<f64>,
    /// First tap whose filtered reference is cut short by the `L`-tap truncation of `Ĝ`.
    first_tail: usize,
    x: Vec<DelayLine>,
    z: Vec<DelayLine>,
    y: DelayLine,
    r: Vec<f64>,
    w: Vec<f64>,
    projection: ProjectionPair,
    scratch: Vec<f64>,
    vss: Vss,
    stride: usize,
    steps: usize,
}

impl Controller {
    /// `w(0) = q`.
    pub fn new(g_model: &ImpulseResponse, num_channels: usize, l: usize, projection: ProjectionPair, vss: VssParams) -> Result<Self> {
        if num_channels == 0 || l == 0 {
            return Err(AncError::InvalidDimension("controller needs at least one channel and L ≥ 1".into()));
        }
        if projection.dim() != num_channels * l {
            return Err(AncError::InvalidDimension(format!(
                "projection has dimension {}, expected {}",
                projection.dim(),
                num_channels * l
            )));
        }
        let g = trimmed(g_model)?;
        let last = g.len() - 1;
        let first_tail = l.saturating_sub(last);
        let hist = l.max(g.len());
        Ok(Controller {
            l,
            k: num_channels,
            first_tail,
            x: vec![DelayLine::new(hist); num_channels],
            z: vec![DelayLine::new(l); num_channels],
            y: DelayLine::new(g.len() - 1),
            r: vec![0.0; num_channels * l],
            w: projection.q().to_vec(),
            scratch: vec![0.0; projection.rank()],
            projection,
            g,
            vss: Vss::new(vss)?,
            stride: 1,
            steps: 0,
        })
    }

    /// Apply `P` only every `stride` updates (plain gradient steps in between).
    pub fn with_projection_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.w.len() {
            return Err(AncError::InvalidDimension(format!("{} weights, expected {}", w.len(), self.w.len())));
        }
        self.w.copy_from_slice(w);
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.vss.mu
    }

    pub fn num_channels(&self) -> usize {
        self.k
    }

    pub fn filter_len(&self) -> usize {
        self.l
    }

    /// Current filtered reference `r(n)`.
    pub fn filtered_reference(&self) -> &[f64] {
        &self.r
    }

    /// Steps 2–3: rebuilds `d̂(n)` from `e(n)` and shifts all input lines. Returns `d̂(n)`.
    pub fn push_inputs(&mut self, refs: &[f64], e: f64) -> Result<f64> {
        if refs.len() + 1 != self.k {
            return Err(AncError::InvalidDimension(format!("{} reference samples, expected {}", refs.len(), self.k - 1)));
        }
        let dhat = e - dot(&self.g[1..], self.y.view());
        let l = self.l;
        for ch in 0..self.k {
            let v = if ch + 1 < self.k { refs[ch] } else { dhat };
            self.x[ch].push(v);
            let xv = self.x[ch].view();
            let zn = dot(&self.g, &xv[..self.g.len()]);
            self.z[ch].push(zn);
            let r = &mut self.r[ch * l..(ch + 1) * l];
            r[..self.first_tail].copy_from_slice(&self.z[ch].view()[..self.first_tail]);
            for (j, rj) in r.iter_mut().enumerate().skip(self.first_tail) {
                *rj = dot(&self.g[..l - j], &xv[j..l]);
            }
        }
        Ok(dhat)
    }

    /// Step 4: `y(n) = w(n)ᵀx(n)`.
    pub fn output(&self) -> f64 {
        let l = self.l;
        (0..self.k).map(|ch| dot(&self.w[ch * l..(ch + 1) * l], &self.x[ch].view()[..l])).sum()
    }

    /// Step 5 with adaptation error `err`; returns the step size used.
    pub fn adapt(&mut self, err: f64) -> f64 {
        let mu = self.vss.mu;
        let scale = mu * err;
        for (w, r) in self.w.iter_mut().zip(&self.r) {
            *w -= scale * r;
        }
        self.steps += 1;
        if self.steps % self.stride == 0 {
            self.projection.project_in_place(&mut self.w, &mut self.scratch);
            for (w, q) in self.w.iter_mut().zip(self.projection.q()) {
                *w += q;
            }
        }
        vss_update(&mut self.vss, err);
        mu
    }

    /// Records the total loudspeaker drive `y(n)` used for the next `d̂`.
    pub fn record_drive(&mut self, y: f64) {
        self.y.push(y);
    }

    /// One full sample: returns `y(n)`.
    pub fn step(&mut self, refs: &[f64], e: f64) -> Result<f64> {
        self.push_inputs(refs, e)?;
        let y = self.output();
        self.adapt(e);
        self.record_drive(y);
        Ok(y)
    }
}

/// How an extracted desired signal re-enters the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Added to the error signal that drives adaptation.
    ErrorSignal,
    /// Added to the loudspeaker drive after `pre_delay` samples.
    SecondaryDrive { pre_delay: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorLayout {
    pub mics: Vec<usize>,
    pub filter_len: usize,
    pub gain: f64,
    /// Total extraction delay in samples.
    pub delay: usize,
    pub injection: Injection,
}

/// Everything needed to replay a run with frozen filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopLayout {
    /// Microphone feeding each channel; the last entry is the error mic (its channel is `d̂`).
    pub channel_mics: Vec<usize>,
    pub error_mic: usize,
    pub filter_len: usize,
    pub secondary: Vec<f64>,
    pub extractor: Option<ExtractorLayout>,
}

/// Filters in effect over samples `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub start: usize,
    pub end: usize,
    pub anc: Vec<f64>,
    pub extractor: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub fs: f64,
    pub e: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// Step size at each snapshot.
    pub mu: Vec<f64>,
    pub hop: usize,
    pub snapshots: Vec<Snapshot>,
    pub layout: LoopLayout,
    pub divergence: Option<DivergenceReport>,
    /// Desired and noise components filtered with the filters in effect at every sample.
    pub components: Option<ComponentDecomposition>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// `Err(Diverged)` if the run was halted.
    pub fn check(&self) -> Result<()> {
        match &self.divergence {
            Some(r) => Err(AncError::Diverged(Box::new(r.clone()))),
            None => Ok(()),
        }
    }

    /// Snapshot covering sample `n`.
    pub fn snapshot_at(&self, n: usize) -> Option<&Snapshot> {
        self.snapshots.get(n / self.hop.max(1)).filter(|s| s.start <= n && n < s.end)
    }

    /// `n,d,e,y` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "n,d,e,y")?;
        for n in 0..self.len() {
            writeln!(out, "{n},{:.9e},{:.9e},{:.9e}", self.d[n], self.e[n], self.y[n])?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per snapshot: `start, end, w...` (`snapshots.bin`), plus
    /// `extractor_snapshots.bin` when an extractor ran.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .snapshots
            .iter()
            .map(|s| [s.start as f64, s.end as f64].into_iter().chain(s.anc.iter().copied()).collect())
            .collect();
        let cols = rows.first().map_or(2, Vec::len);
        write_rows_bin(&dir.join("snapshots.bin"), rows.len(), cols, rows.iter().map(Vec::as_slice))?;
        if self.layout.extractor.is_some() {
            let rows: Vec<Vec<f64>> = self
                .snapshots
                .iter()
                .map(|s| [s.start as f64, s.end as f64].into_iter().chain(s.extractor.iter().flatten().copied()).collect())
                .collect();
            let cols = rows.first().map_or(2, Vec::len);
            write_rows_bin(&dir.join("extractor_snapshots.bin"), rows.len(), cols, rows.iter().map(Vec::as_slice))?;
        }
        Ok(())
    }
}

/// Collects filter snapshots at the middle of every hop.
#[derive(Debug)]
pub struct SnapshotRecorder {
    hop: usize,
    total: usize,
    pub snapshots: Vec<Snapshot>,
    pub mu: Vec<f64>,
}

impl SnapshotRecorder {
    pub fn new(hop: usize, total: usize) -> Self {
        SnapshotRecorder { hop: hop.max(1), total, snapshots: Vec::new(), mu: Vec::new() }
    }

    fn range(&self, n: usize) -> (usize, usize) {
        let start = n / self.hop * self.hop;
        (start, (start + self.hop).min(self.total))
    }

    /// Called before the update at sample `n`.
    pub fn observe(&mut self, n: usize, anc: &[f64], extractor: Option<&[f64]>, mu: f64) {
        let (start, end) = self.range(n);
        if n == start + (end - start - 1) / 2 {
            self.snapshots.push(Snapshot { start, end, anc: anc.to_vec(), extractor: extractor.map(<[f64]>::to_vec) });
            self.mu.push(mu);
        }
    }

    /// Closes the record after `len` samples (shorter than `total` when halted).
    pub fn finish(&mut self, len: usize, anc: &[f64], extractor: Option<&[f64]>, mu: f64) {
        self.snapshots.retain(|s| s.start < len);
        if let Some(last) = self.snapshots.last_mut() {
            last.end = last.end.min(len);
        }
        let covered = self.snapshots.last().map_or(0, |s| s.end);
        if covered < len {
            self.snapshots.push(Snapshot { start: covered, end: len, anc: anc.to_vec(), extractor: extractor.map(<[f64]>::to_vec) });
            self.mu.push(mu);
        }
    }
}

/// Divergence threshold `factor·RMS(d)`.
pub fn divergence_threshold(d: &[f64], factor: f64) -> f64 {
    factor * mean_square(d).sqrt()
}

/// Checks `e(n)` and `y(n)` against the threshold.
pub fn check_divergence(n: usize, e: f64, y: f64, threshold: f64) -> Option<DivergenceReport> {
    if !e.is_finite() || !y.is_finite() {
        return Some(DivergenceReport { sample: n, reason: "non-finite signal".into(), error_value: e, threshold });
    }
    (e.abs() > threshold).then(|| DivergenceReport {
        sample: n,
        reason: "error magnitude above threshold".into(),
        error_value: e,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub vss: VssParams,
    /// Snapshot hop in samples.
    pub hop: usize,
    #[serde(default = "one")]
    pub projection_stride: usize,
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn one() -> usize {
    1
}

pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;

fn default_divergence_factor() -> f64 {
    DEFAULT_DIVERGENCE_FACTOR
}

impl LoopConfig {
    /// Snapshot hop of 0.1 s.
    pub fn new(vss: VssParams, fs: f64) -> Self {
        LoopConfig {
            vss,
            hop: ((0.1 * fs).round() as usize).max(1),
            projection_stride: 1,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
        }
    }
}

/// Gathers the reference channels (`channel_mics` without the last entry) at sample `n`.
pub fn gather_refs(comps: &[Vec<f64>], mics: &[usize], n: usize, out: &mut [f64]) {
    for (o, &m) in out.iter_mut().zip(mics) {
        *o = comps[m][n];
    }
}

/// Runs the closed loop on the rendered microphone signals.
///
/// `channel_mics` lists the microphone of each channel; the last entry must be the
/// error microphone, whose channel is fed by `d̂`. The secondary-path model equals the
/// true path.
pub fn run_closed_loop(
    scene: &crate::scene::RenderedScene,
    channel_mics: &[usize],
    projection: ProjectionPair,
    config: &LoopConfig,
) -> Result<SimulationTrace> {
    if channel_mics.last() != Some(&scene.error_mic) {
        return Err(AncError::Configuration("the last channel must be the error microphone".into()));
    }
    if let Some(&bad) = channel_mics.iter().find(|&&m| m >= scene.num_mics()) {
        return Err(AncError::Configuration(format!("channel microphone {bad} out of range")));
    }
    let l = scene.filter_len;
    let mut ctrl = Controller::new(&scene.secondary, channel_mics.len(), l, projection, config.vss)?
        .with_projection_stride(config.projection_stride);
    let mut plant = Plant::new(&scene.secondary)?;
    let mics: Vec<Vec<f64>> = (0..scene.num_mics()).map(|m| scene.mic_signal(m)).collect();
    let d = mics[scene.error_mic].clone();
    let n_total = scene.len();
    let threshold = divergence_threshold(&d, config.divergence_factor);
    let layout = LoopLayout {
        channel_mics: channel_mics.to_vec(),
        error_mic: scene.error_mic,
        filter_len: l,
        secondary: scene.secondary.taps().to_vec(),
        extractor: None,
    };
    let mut shadows = [ComponentFilter::new(&layout), ComponentFilter::new(&layout)];
    let mut rec = SnapshotRecorder::new(config.hop, n_total);
    let refs_mics = &channel_mics[..channel_mics.len() - 1];
    let mut refs = vec![0.0; refs_mics.len()];
    let (mut e_out, mut y_out) = (Vec::with_capacity(n_total), Vec::with_capacity(n_total));
    let mut divergence = None;
    for n in 0..n_total {
        let e = plant.error(d[n]);
        gather_refs(&mics, refs_mics, n, &mut refs);
        ctrl.push_inputs(&refs, e)?;
        let y = ctrl.output();
        e_out.push(e);
        y_out.push(y);
        if let Some(report) = check_divergence(n, e, y, threshold) {
            divergence = Some(report);
            break;
        }
        rec.observe(n, ctrl.weights(), None, ctrl.mu());
        shadows[0].push(&scene.desired, n, ctrl.weights(), None);
        shadows[1].push(&scene.noise, n, ctrl.weights(), None);
        ctrl.adapt(e);
        ctrl.record_drive(y);
        plant.push(y);
    }
    let len = e_out.len();
    rec.finish(len, ctrl.weights(), None, ctrl.mu());
    let components = components_of(shadows, &layout, scene);
    Ok(SimulationTrace {
        fs: scene.fs,
        e: e_out,
        y: y_out,
        d: d[..len].to_vec(),
        mu: rec.mu,
        hop: config.hop.max(1),
        snapshots: rec.snapshots,
        layout,
        divergence,
        components: Some(components),
    })
}

/// Finishes the desired (first) and noise (second) component filters.
pub(crate) fn components_of(shadows: [ComponentFilter; 2], layout: &LoopLayout, scene: &crate::scene::RenderedScene) -> ComponentDecomposition {
    let [ds, ns] = shadows;
    let (e_s, y_s) = ds.finish(layout, &scene.desired);
    let (v_anc, y_v) = ns.finish(layout, &scene.noise);
    ComponentDecomposition { e_s, v_anc, y_s, y_v }
}
