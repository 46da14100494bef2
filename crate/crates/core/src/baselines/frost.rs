//! Adaptive Frost (linearly constrained minimum variance) beamformer.

use crate::adaptive::DelayLine;
use crate::constraint::{build_constraint_for_channels, ProjectionPair, Regularization};
use crate::dsp::ImpulseResponse;
use crate::error::{ensure_finite, AncError, Result};

/// Normalized step size of the extractor.
pub const DEFAULT_FROST_MU: f64 = 0.05;

/// `w ← P[w − μ y x / (xᵀx + ε)] + F` with `Hᵀw = f` over the full combined response,
/// enforced by the pseudoinverse projection; `w(0) = F`.
#[derive(Debug, Clone)]
pub struct FrostBeamformer {
    l: usize,
    lines: Vec<DelayLine>,
    w: Vec<f64>,
    x: Vec<f64>,
    projection: ProjectionPair,
    scratch: Vec<f64>,
    mu: f64,
}

impl FrostBeamformer {
    /// `reirs[k]` is the response of beamformer mic `k` to the steering direction and
    /// `target` the desired response of the output, both relative to the same source.
    pub fn new(reirs: &[ImpulseResponse], target: &ImpulseResponse, l: usize, mu: f64) -> Result<Self> {
        if reirs.len() < 2 {
            return Err(AncError::Configuration("a beamformer needs at least 2 microphones".into()));
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(AncError::Configuration(format!("invalid extractor step size {mu}")));
        }
        let channels: Vec<usize> = (0..reirs.len()).collect();
        let constraint = build_constraint_for_channels(reirs, &channels, 0, l)?;
        // Every lag of the combined response, so the steered direction is undistorted.
        let span = l + reirs.iter().map(ImpulseResponse::len).max().unwrap_or(1) - 1;
        let constraint = constraint.with_span(span)?;
        if target.len() > span {
            return Err(AncError::Configuration(format!("target response longer than the {span} constrained lags")));
        }
        let mut f = target.taps().to_vec();
        f.resize(span, 0.0);
        let projection = ProjectionPair::from_matrix(&constraint.h_dense(), &f, Regularization::PseudoInverse)?;
        Ok(FrostBeamformer {
            l,
            lines: vec![DelayLine::new(l); reirs.len()],
            w: projection.q().to_vec(),
            x: vec![0.0; reirs.len() * l],
            scratch: vec![0.0; projection.rank()],
            projection,
            mu,
        })
    }

    pub fn filter_len(&self) -> usize {
        self.l
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn projection(&self) -> &ProjectionPair {
        &self.projection
    }

    /// Consumes one sample per microphone and returns the output before adapting.
    pub fn step(&mut self, samples: &[f64]) -> f64 {
        let l = self.l;
        for (k, (line, &v)) in self.lines.iter_mut().zip(samples).enumerate() {
            line.push(v);
            self.x[k * l..(k + 1) * l].copy_from_slice(line.view());
        }
        let y: f64 = self.w.iter().zip(&self.x).map(|(a, b)| a * b).sum();
        let power: f64 = self.x.iter().map(|v| v * v).sum();
        let scale = self.mu * y / (power + 1e-12);
        for (w, x) in self.w.iter_mut().zip(&self.x) {
            *w -= scale * x;
        }
        self.projection.project_in_place(&mut self.w, &mut self.scratch);
        for (w, q) in self.w.iter_mut().zip(self.projection.q()) {
            *w += q;
        }
        y
    }
}

/// Runs the extractor over whole microphone signals and returns its output.
pub fn frost_beamformer_run(signals: &[Vec<f64>], reirs: &[ImpulseResponse], target: &ImpulseResponse, l: usize, mu: f64) -> Result<Vec<f64>> {
    if signals.len() != reirs.len() {
        return Err(AncError::InvalidDimension(format!("{} signals for {} responses", signals.len(), reirs.len())));
    }
    let n = signals.first().map_or(0, Vec::len);
    if signals.iter().any(|s| s.len() != n) {
        return Err(AncError::InvalidDimension("beamformer inputs differ in length".into()));
    }
    let mut bf = FrostBeamformer::new(reirs, target, l, mu)?;
    let mut frame = vec![0.0; signals.len()];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (f, s) in frame.iter_mut().zip(signals) {
            *f = s[i];
        }
        let y = bf.step(&frame);
        if !y.is_finite() {
            return Err(AncError::Diverged(Box::new(crate::error::DivergenceReport {
                sample: i,
                reason: "extractor output is not finite".into(),
                error_value: y,
                threshold: f64::INFINITY,
            })));
        }
        out.push(y);
    }
    ensure_finite(&out, "extractor output")?;
    Ok(out)
}
