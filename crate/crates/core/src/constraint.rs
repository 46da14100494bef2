//! Spatial constraint `Hᵀ(δ̃ + Gw) = f` and the projection pair `(P, q)` that keeps
//! the adaptive filter on it.
//!
//! Stacked vectors have `K` channels of `L` taps. Channels `0..K-1` are the reference
//! microphones, channel `K-1` carries the error-microphone disturbance. `Hᵀu` is the
//! sum over channels of the convolution `h_k * u_k` truncated to the constraint span
//! `M` (`M = L` by default), so `H` is `KL×M` with block `k` the `L×M` Toeplitz matrix
//! of `h_k`. A longer span also pins the tail of the combined response.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dsp::filter::{max_zero_magnitude, MIN_PHASE_TOLERANCE};
use crate::dsp::{make_toeplitz, ImpulseResponse, ToeplitzOperator};
use crate::error::{ensure_finite, AncError, Result};
use crate::io::write_matrix_bin;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConstraint {
    blocks: Vec<ToeplitzOperator>,
    f: Vec<f64>,
    channel_mics: Vec<usize>,
    ref_mic: usize,
    weighted: bool,
    span: usize,
}

/// First `m` samples of `a * b`.
fn conv_trunc(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, &ai) in a.iter().enumerate().take(m) {
        if ai == 0.0 {
            continue;
        }
        for (o, &bj) in out[i..].iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
    out
}

/// Builds `H` and `f = h_K` from the ReIRs of every microphone.
///
/// Channels are ordered with the reference microphones first (ascending index) and
/// the error microphone last.
pub fn build_constraint(reirs: &[ImpulseResponse], error_mic: usize, ref_mic: usize, l: usize) -> Result<SpatialConstraint> {
    if error_mic >= reirs.len() || ref_mic >= reirs.len() {
        return Err(AncError::Configuration(format!(
            "missing ReIR: {} responses for error mic {error_mic} and reference mic {ref_mic}",
            reirs.len()
        )));
    }
    let mut order: Vec<usize> = (0..reirs.len()).filter(|&m| m != error_mic).collect();
    order.push(error_mic);
    build_constraint_for_channels(reirs, &order, ref_mic, l)
}

/// Constraint over an explicit channel list; the last channel is the error microphone.
pub fn build_constraint_for_channels(
    reirs: &[ImpulseResponse],
    channel_mics: &[usize],
    ref_mic: usize,
    l: usize,
) -> Result<SpatialConstraint> {
    if channel_mics.is_empty() {
        return Err(AncError::InvalidDimension("constraint needs at least one channel".into()));
    }
    let blocks = channel_mics
        .iter()
        .map(|&m| {
            reirs
                .get(m)
                .ok_or_else(|| AncError::Configuration(format!("missing ReIR for mic {m}")))
                .and_then(|h| make_toeplitz(h, l))
        })
        .collect::<Result<Vec<_>>>()?;
    let f = blocks.last().map(|b| b.column().to_vec()).unwrap_or_default();
    ensure_finite(&f, "constraint vector")?;
    Ok(SpatialConstraint { blocks, f, channel_mics: channel_mics.to_vec(), ref_mic, weighted: false, span: l })
}

impl SpatialConstraint {
    /// Constraint from explicit blocks and target (used for small synthetic instances).
    pub fn from_parts(blocks: Vec<ToeplitzOperator>, f: Vec<f64>, channel_mics: Vec<usize>, ref_mic: usize) -> Result<Self> {
        let l = blocks.first().map(|b| b.dim()).ok_or_else(|| AncError::InvalidDimension("no blocks".into()))?;
        if blocks.iter().any(|b| b.dim() != l) || f.len() != l || channel_mics.len() != blocks.len() {
            return Err(AncError::InvalidDimension("inconsistent constraint dimensions".into()));
        }
        ensure_finite(&f, "constraint vector")?;
        Ok(SpatialConstraint { blocks, f, channel_mics, ref_mic, weighted: false, span: l })
    }

    /// Copy constraining the first `span` output lags instead of `L`. Apply before any
    /// spectral weighting.
    pub fn with_span(&self, span: usize) -> Result<Self> {
        if span < self.filter_len() {
            return Err(AncError::InvalidDimension(format!("span {span} is shorter than the filter length {}", self.filter_len())));
        }
        if self.weighted {
            return Err(AncError::Configuration("set the span before applying spectral weighting".into()));
        }
        let mut f = self.error_reir().to_vec();
        f.resize(span, 0.0);
        Ok(SpatialConstraint { f, span, ..self.clone() })
    }

    /// Longest useful span: every lag of `h_k * g * w_k` with `g` of `g_len` taps.
    pub fn full_span(&self, g_len: usize) -> usize {
        2 * self.filter_len() + g_len.max(1) - 2
    }

    /// Number of constrained output lags `M`.
    pub fn span(&self) -> usize {
        self.span
    }

    pub fn num_channels(&self) -> usize {
        self.blocks.len()
    }

    pub fn filter_len(&self) -> usize {
        self.blocks[0].dim()
    }

    /// Stacked dimension `KL`.
    pub fn dim(&self) -> usize {
        self.num_channels() * self.filter_len()
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn blocks(&self) -> &[ToeplitzOperator] {
        &self.blocks
    }

    pub fn channel_mics(&self) -> &[usize] {
        &self.channel_mics
    }

    pub fn ref_mic(&self) -> usize {
        self.ref_mic
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    /// Error-microphone ReIR `h_K` (first `L` taps).
    pub fn error_reir(&self) -> &[f64] {
        self.blocks.last().expect("non-empty").column()
    }

    /// `δ̃`: selects tap 0 of the error channel.
    pub fn delta_tilde(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        d[(self.num_channels() - 1) * self.filter_len()] = 1.0;
        d
    }

    /// `Hᵀu = Σ_k H_k u_k`.
    pub fn apply_ht(&self, u: &[f64]) -> Vec<f64> {
        let l = self.filter_len();
        if self.span == l {
            let mut out = vec![0.0; l];
            for (b, uk) in self.blocks.iter().zip(u.chunks(l)) {
                for (o, v) in out.iter_mut().zip(b.apply(uk)) {
                    *o += v;
                }
            }
            return out;
        }
        let mut out = vec![0.0; self.span];
        for (b, uk) in self.blocks.iter().zip(u.chunks(l)) {
            for (o, v) in out.iter_mut().zip(conv_trunc(b.column(), uk, self.span)) {
                *o += v;
            }
        }
        out
    }

    /// `Hz`: stacks `H_kᵀ z`.
    pub fn apply_h(&self, z: &[f64]) -> Vec<f64> {
        let l = self.filter_len();
        if self.span == l {
            return self.blocks.iter().flat_map(|b| b.apply_transpose(z)).collect();
        }
        let mut out = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            let h = b.column();
            out.extend((0..l).map(|i| h.iter().zip(&z[i..]).map(|(a, c)| a * c).sum::<f64>()));
        }
        out
    }

    /// Dense `H` (`KL×M`).
    pub fn h_dense(&self) -> DMatrix<f64> {
        Self::stack(self.blocks.iter().map(|b| b.column().to_vec()), self.filter_len(), self.span)
    }

    /// Dense `A = GᵀH` for a block-diagonal `G` built from `g`; block `k` is the
    /// `L×M` Toeplitz matrix of `h_k * g`.
    pub fn gt_h(&self, g: &ImpulseResponse) -> Result<DMatrix<f64>> {
        let m = self.span;
        Ok(Self::stack(self.blocks.iter().map(|b| conv_trunc(b.column(), g.taps(), m)), self.filter_len(), m))
    }

    fn stack(columns: impl Iterator<Item = Vec<f64>>, l: usize, m: usize) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = columns.collect();
        let mut a = DMatrix::zeros(cols.len() * l, m);
        for (k, c) in cols.iter().enumerate() {
            for i in 0..l {
                for (j, &v) in c.iter().enumerate().take(m.saturating_sub(i)) {
                    a[(k * l + i, i + j)] = v;
                }
            }
        }
        a
    }

    /// `f − Hᵀδ̃`, the part of the target the control filter must supply.
    pub fn target_offset(&self) -> Vec<f64> {
        let htd = self.apply_ht(&self.delta_tilde());
        self.f.iter().zip(htd).map(|(f, h)| f - h).collect()
    }

    /// Copy with every block and the target scaled (for invariance checks).
    pub fn scaled(&self, c: f64) -> SpatialConstraint {
        SpatialConstraint {
            blocks: self
                .blocks
                .iter()
                .map(|b| ToeplitzOperator::from_column(b.column().iter().map(|v| v * c).collect()).expect("non-empty"))
                .collect(),
            f: self.f.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Dumps `H` as a binary matrix file.
    pub fn dump_h(&self, path: &Path) -> Result<()> {
        write_matrix_bin(path, &self.h_dense())
    }
}

/// Replaces `f` by `S h_K`, with `S` the Toeplitz matrix of a minimum-phase filter.
pub fn apply_spectral_weighting(constraint: &SpatialConstraint, s_ir: &ImpulseResponse) -> Result<SpatialConstraint> {
    let max_root = max_zero_magnitude(s_ir.taps());
    if max_root > 1.0 + MIN_PHASE_TOLERANCE {
        return Err(AncError::NotMinimumPhase { max_root });
    }
    let f = conv_trunc(s_ir.taps(), constraint.error_reir(), constraint.span());
    ensure_finite(&f, "weighted constraint vector")?;
    Ok(SpatialConstraint { f, weighted: true, ..constraint.clone() })
}

/// How the inner inverse `(AᵀA + γI)⁻¹` of the projection is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularization {
    /// Fixed `γ > 0`.
    Tikhonov { gamma: f64 },
    /// `γ = λ_max(AᵀA) / ratio`.
    EigenRelative { ratio: f64 },
    /// Moore-Penrose pseudoinverse (`γ → 0`).
    PseudoInverse,
    /// Plain inverse with `γ = 0`; fails on a singular system.
    Exact,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Tikhonov { gamma: 1e-4 }
    }
}

/// `P = I − U diag(p) Uᵀ` and `q`, kept in low-rank form.
///
/// `U` holds the left singular vectors of `A = GᵀH`, so applying `P` costs
/// `O(KL·rank)` instead of `O((KL)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    u: DMatrix<f64>,
    shrink: Vec<f64>,
    q: Vec<f64>,
    gamma: f64,
    regularization: Regularization,
}

/// Builds `(P, q)` for the constraint with secondary path `g` (one block per channel).
pub fn build_projection(constraint: &SpatialConstraint, g: &ImpulseResponse, regularization: Regularization) -> Result<ProjectionPair> {
    let a = constraint.gt_h(g)?;
    ProjectionPair::from_matrix(&a, &constraint.target_offset(), regularization)
}

impl ProjectionPair {
    /// Projection onto `{w : Aᵀw = c}` (exactly for pseudoinverse/exact modes).
    pub fn from_matrix(a: &DMatrix<f64>, c: &[f64], regularization: Regularization) -> Result<Self> {
        if a.ncols() != c.len() {
            return Err(AncError::InvalidDimension(format!("A has {} columns, c has {} entries", a.ncols(), c.len())));
        }
        ensure_finite(a.as_slice(), "constraint matrix")?;
        ensure_finite(c, "constraint offset")?;
        let svd = a.clone().svd(true, true);
        let u_full = svd.u.ok_or_else(|| AncError::Numerical("SVD did not return U".into()))?;
        let v_t = svd.v_t.ok_or_else(|| AncError::Numerical("SVD did not return Vᵀ".into()))?;
        let sigma = svd.singular_values;
        let s_max = sigma.iter().cloned().fold(0.0, f64::max);
        let gamma = match regularization {
            Regularization::Tikhonov { gamma } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(AncError::Configuration(format!("Tikhonov gamma must be positive, got {gamma}")));
                }
                gamma
            }
            Regularization::EigenRelative { ratio } => {
                if !(ratio.is_finite() && ratio > 0.0) {
                    return Err(AncError::Configuration(format!("eigenvalue ratio must be positive, got {ratio}")));
                }
                s_max * s_max / ratio
            }
            Regularization::PseudoInverse | Regularization::Exact => 0.0,
        };
        let tol = PINV_RELATIVE_TOLERANCE * s_max;
        if regularization == Regularization::Exact {
            let s_min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
            if s_max == 0.0 || s_min <= tol {
                return Err(AncError::Numerical(format!(
                    "AᵀA is singular (σ_min/σ_max = {:.3e}); use the pseudoinverse or a positive gamma",
                    if s_max > 0.0 { s_min / s_max } else { 0.0 }
                )));
            }
        }
        let keep: Vec<usize> = (0..sigma.len())
            .filter(|&i| if gamma > 0.0 { sigma[i] > 0.0 } else { sigma[i] > tol })
            .collect();
        let n = a.nrows();
        let mut u = DMatrix::zeros(n, keep.len());
        let mut shrink = Vec::with_capacity(keep.len());
        let mut q = DVector::zeros(n);
        let c = DVector::from_column_slice(c);
        for (j, &i) in keep.iter().enumerate() {
            let s = sigma[i];
            let col = u_full.column(i);
            u.set_column(j, &col);
            shrink.push(s * s / (s * s + gamma));
            let coeff = s / (s * s + gamma) * v_t.row(i).transpose().dot(&c);
            q.axpy(coeff, &col, 1.0);
        }
        let q = q.as_slice().to_vec();
        ensure_finite(&q, "q")?;
        Ok(ProjectionPair { u, shrink, q, gamma, regularization })
    }

    /// Identity projection with `q = 0` (constraint disabled).
    pub fn identity(dim: usize) -> Self {
        ProjectionPair {
            u: DMatrix::zeros(dim, 0),
            shrink: Vec::new(),
            q: vec![0.0; dim],
            gamma: 0.0,
            regularization: Regularization::PseudoInverse,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn rank(&self) -> usize {
        self.shrink.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn regularization(&self) -> Regularization {
        self.regularization
    }

    /// `v ← P v`. `scratch` must have at least `rank()` entries.
    pub fn project_in_place(&self, v: &mut [f64], scratch: &mut [f64]) {
        let n = self.dim();
        let data = self.u.as_slice();
        for (j, (s, p)) in scratch.iter_mut().zip(&self.shrink).enumerate() {
            let col = &data[j * n..(j + 1) * n];
            *s = p * col.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        for (j, &s) in scratch.iter().take(self.rank()).enumerate() {
            let col = &data[j * n..(j + 1) * n];
            for (vi, ci) in v.iter_mut().zip(col) {
                *vi -= s * ci;
            }
        }
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        let mut scratch = vec![0.0; self.rank()];
        self.project_in_place(&mut out, &mut scratch);
        out
    }

    /// Dense `P` (`KL×KL`).
    pub fn p_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let scaled = DMatrix::from_fn(n, self.rank(), |i, j| self.u[(i, j)] * self.shrink[j]);
        DMatrix::identity(n, n) - scaled * self.u.transpose()
    }

    /// Writes `P` and `q` as binary matrix files into `dir` (`P.bin`, `q.bin`).
    pub fn dump(&self, dir: &Path) -> Result<()> {
        write_matrix_bin(&dir.join("P.bin"), &self.p_dense())?;
        write_matrix_bin(&dir.join("q.bin"), &DMatrix::from_column_slice(self.dim(), 1, &self.q))
    }
}

/// `‖Hᵀ(δ̃ + Gw) − f‖₂`.
pub fn constraint_residual(w: &[f64], g: &ImpulseResponse, constraint: &SpatialConstraint) -> Result<f64> {
    if w.len() != constraint.dim() {
        return Err(AncError::InvalidDimension(format!("w has {} entries, expected {}", w.len(), constraint.dim())));
    }
    let m = constraint.span();
    let mut total = constraint.apply_ht(&constraint.delta_tilde());
    for (b, wk) in constraint.blocks().iter().zip(w.chunks(constraint.filter_len())) {
        let gw = conv_trunc(g.taps(), wk, m);
        for (t, v) in total.iter_mut().zip(conv_trunc(b.column(), &gw, m)) {
            *t += v;
        }
    }
    Ok(total.iter().zip(constraint.f()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::min_phase_highpass;
    use crate::dsp::signal::dtft;

    fn delta(d: usize, l: usize) -> ImpulseResponse {
        ImpulseResponse::delta(d, l, 8000.0).unwrap()
    }

    #[test]
    fn single_channel_delta_is_identity() {
        let c = build_constraint(&[delta(0, 4)], 0, 0, 4).unwrap();
        assert_eq!(c.h_dense(), DMatrix::identity(4, 4));
        assert_eq!(c.f(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reference_block_is_shifted_identity() {
        let reirs = vec![delta(3, 8), delta(5, 8)];
        let c = build_constraint(&reirs, 1, 0, 8).unwrap();
        let h = c.h_dense();
        for i in 0..8 {
            for j in 0..8 {
                // Block 0 holds H_0ᵀ: ones where column = row + 3.
                assert_eq!(h[(i, j)], if j == i + 3 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn missing_reir_rejected() {
        assert!(matches!(build_constraint(&[delta(0, 4)], 1, 0, 4), Err(AncError::Configuration(_))));
    }

    #[test]
    fn ht_matches_dense() {
        let reirs = vec![
            ImpulseResponse::new(vec![0.3, -0.2, 0.7], 8000.0).unwrap(),
            ImpulseResponse::new(vec![0.0, 1.0, 0.4, 0.1], 8000.0).unwrap(),
        ];
        let c = build_constraint(&reirs, 1, 0, 5).unwrap();
        let u: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = c.h_dense().transpose() * DVector::from_column_slice(&u);
        for (a, b) in c.apply_ht(&u).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Hᵀδ̃ is the error-channel ReIR.
        assert_eq!(c.apply_ht(&c.delta_tilde()), c.error_reir().to_vec());
    }

    #[test]
    fn weighting_examples() {
        let reirs = vec![delta(2, 16), ImpulseResponse::new(vec![0.0, 0.0, 0.5, 1.0, 0.25], 8000.0).unwrap()];
        let c = build_constraint(&reirs, 1, 0, 16).unwrap();
        let same = apply_spectral_weighting(&c, &delta(0, 1)).unwrap();
        assert_eq!(same.f(), c.f());
        assert!(same.is_weighted());
        let half = apply_spectral_weighting(&c, &delta(0, 1).scaled(0.5)).unwrap();
        for (a, b) in half.f().iter().zip(c.f()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let non_min = ImpulseResponse::new(vec![0.5, 1.0], 8000.0).unwrap();
        assert!(matches!(apply_spectral_weighting(&c, &non_min), Err(AncError::NotMinimumPhase { .. })));
    }

    #[test]
    fn highpass_weighting_attenuates_low_band() {
        let fs = 8000.0;
        let l = 512;
        let reirs = vec![delta(8, l), crate::dsp::fractional_delay_ir(10.4, l, fs).unwrap()];
        let c = build_constraint(&reirs, 1, 0, l).unwrap();
        let s = min_phase_highpass(140.0, fs, l).unwrap();
        let w = apply_spectral_weighting(&c, &s).unwrap();
        let omega = 2.0 * std::f64::consts::PI * 70.0 / fs;
        let drop = 20.0 * (dtft(w.f(), omega).norm() / dtft(c.f(), omega).norm()).log10();
        assert!(drop <= -20.0, "{drop} dB");
    }

    #[test]
    fn identity_path_single_channel_projection() {
        let c = SpatialConstraint::from_parts(
            vec![ToeplitzOperator::from_column(vec![1.0, 0.0, 0.0]).unwrap()],
            vec![0.5, -1.0, 2.0],
            vec![0],
            0,
        )
        .unwrap();
        let p = build_projection(&c, &delta(0, 1), Regularization::PseudoInverse).unwrap();
        assert!(p.p_dense().norm() < 1e-12);
        let expect = [0.5 - 1.0, -1.0, 2.0];
        for (a, b) in p.q().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mode_rejects_singular_system() {
        let reirs = vec![delta(2, 6), delta(3, 6)];
        let c = build_constraint(&reirs, 1, 0, 6).unwrap();
        let r = build_projection(&c, &delta(1, 6), Regularization::Exact);
        assert!(matches!(r, Err(AncError::Numerical(_))));
        assert!(build_projection(&c, &delta(1, 6), Regularization::PseudoInverse).is_ok());
    }

    #[test]
    fn low_rank_apply_matches_dense() {
        let reirs = vec![
            ImpulseResponse::new(vec![0.0, 1.0, 0.3], 8000.0).unwrap(),
            ImpulseResponse::new(vec![0.0, 0.0, 0.8, -0.2], 8000.0).unwrap(),
        ];
        let c = build_constraint(&reirs, 1, 0, 6).unwrap();
        let p = build_projection(&c, &delta(1, 6), Regularization::Tikhonov { gamma: 1e-3 }).unwrap();
        let v: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let dense = p.p_dense() * DVector::from_column_slice(&v);
        for (a, b) in p.project(&v).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sym = p.p_dense();
        assert!((&sym - sym.transpose()).norm() < 1e-12);
    }

    #[test]
    fn residual_of_q_with_invertible_path() {
        let reirs = vec![delta(0, 5), ImpulseResponse::new(vec![0.2, 1.0, 0.3], 8000.0).unwrap()];
        let c = build_constraint(&reirs, 1, 0, 5).unwrap();
        let weighted = apply_spectral_weighting(&c, &ImpulseResponse::new(vec![1.0, -0.5], 8000.0).unwrap()).unwrap();
        let g = delta(0, 1);
        let p = build_projection(&weighted, &g, Regularization::PseudoInverse).unwrap();
        assert!(constraint_residual(p.q(), &g, &weighted).unwrap() < 1e-10);
        let zero = vec![0.0; weighted.dim()];
        let expect = weighted.target_offset().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((constraint_residual(&zero, &g, &weighted).unwrap() - expect).abs() < 1e-15);
    }
}
