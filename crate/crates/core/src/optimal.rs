//! Closed-form constrained optimum.
//!
//! With `Φ = Φ_rr + βI`, `a = Φ⁻¹φ_rd`, `A = GᵀH`, `B = Φ⁻¹A` and `M = AᵀB + ρI`:
//!
//! ```text
//! w = −a  +  B M⁻¹ f  −  B M⁻¹ (Hᵀδ̃ − Aᵀa)
//!     Wiener  constraint   coupling
//! ```
//!
//! which is the solution of the saddle system
//! `[Φ A; Aᵀ −ρI] [w; μ] = [−φ_rd; f − Hᵀδ̃]`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::constraint::{constraint_residual, SpatialConstraint, PINV_RELATIVE_TOLERANCE};
use crate::dsp::filter::filter_slice;
use crate::dsp::ImpulseResponse;
use crate::error::{ensure_finite, AncError, Result};
use crate::io::write_matrix_bin;

/// Time-averaged second-order statistics of the filtered reference `r = Gᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStats {
    pub phi_rr: DMatrix<f64>,
    pub phi_rd: Vec<f64>,
    pub sample_count: usize,
    pub filter_len: usize,
}

/// Per-tap source signal: `r_k[i](n) = y(n − i)` with `y` either the fully filtered
/// channel or, for the last taps where the Toeplitz truncation bites, a channel
/// filtered by a truncated copy of `g`.
struct TapSignals {
    full: Vec<Vec<f64>>,
    tails: Vec<Vec<Option<Vec<f64>>>>,
}

impl TapSignals {
    fn new(x: &[Vec<f64>], g: &[f64], l: usize) -> Self {
        let full: Vec<Vec<f64>> = x.iter().map(|xk| filter_slice(g, xk)).collect();
        let last = g.iter().rposition(|&v| v != 0.0).unwrap_or(0);
        let tails = x
            .iter()
            .map(|xk| {
                (0..l)
                    .map(|i| {
                        (i + last > l - 1).then(|| {
                            let keep = (l - i).min(g.len());
                            filter_slice(&g[..keep], xk)
                        })
                    })
                    .collect()
            })
            .collect();
        TapSignals { full, tails }
    }

    fn signal(&self, k: usize, i: usize) -> &[f64] {
        self.tails[k][i].as_deref().unwrap_or(&self.full[k])
    }

    fn is_tail(&self, k: usize, i: usize) -> bool {
        self.tails[k][i].is_some()
    }
}

fn at(y: &[f64], n: isize) -> f64 {
    if n < 0 {
        0.0
    } else {
        y[n as usize]
    }
}

/// `Σ_{n=a}^{b} y1(n − i) y2(n − j)`.
fn lagged_dot(y1: &[f64], i: usize, y2: &[f64], j: usize, a: usize, b: usize) -> f64 {
    let lo = a.max(i).max(j);
    if lo > b {
        return 0.0;
    }
    y1[lo - i..=b - i].iter().zip(&y2[lo - j..=b - j]).map(|(p, q)| p * q).sum()
}

/// Accumulates `Φ_rr` and `φ_rd` over samples `start..N`.
///
/// `x` holds the `K` stacked channels (the last one is the disturbance `d`). The
/// diagonals of each `Φ_rr` block are filled by the sliding-window recurrence
/// `C(i+1, j+1) = C(i, j) − z_k(b−i) z_l(b−j) + z_k(a−1−i) z_l(a−1−j)`, which is exact;
/// only the first row/column and the truncated tail taps need full inner products.
pub fn accumulate_stats(x: &[Vec<f64>], d: &[f64], g: &ImpulseResponse, l: usize, start: usize) -> Result<CorrelationStats> {
    if x.is_empty() || l == 0 {
        return Err(AncError::InvalidDimension("need at least one channel and L ≥ 1".into()));
    }
    let n = d.len();
    if x.iter().any(|c| c.len() != n) {
        return Err(AncError::InvalidDimension("input streams are not aligned".into()));
    }
    if n <= l || n.saturating_sub(start) < l {
        return Err(AncError::InsufficientData(format!("{n} samples (from {start}) is not longer than L = {l}")));
    }
    for c in x {
        ensure_finite(c, "input stream")?;
    }
    ensure_finite(d, "disturbance stream")?;
    let k = x.len();
    let (a, b) = (start, n - 1);
    let count = b - a + 1;
    let taps = TapSignals::new(x, g.taps(), l);
    let dim = k * l;
    let mut phi = DMatrix::<f64>::zeros(dim, dim);

    for kc in 0..k {
        for lc in kc..k {
            let zk = &taps.full[kc];
            let zl = &taps.full[lc];
            // Seed row 0 and column 0 of the block, then walk each diagonal.
            for s in 0..l {
                let mut c = lagged_dot(zk, 0, zl, s, a, b);
                phi[(kc * l, lc * l + s)] = c;
                for t in 1..l - s {
                    let (i, j) = (t - 1, s + t - 1);
                    c += -zk[b - i] * at(zl, b as isize - j as isize) * f64::from(b >= i)
                        + at(zk, a as isize - 1 - i as isize) * at(zl, a as isize - 1 - j as isize);
                    phi[(kc * l + t, lc * l + s + t)] = c;
                }
                if s == 0 {
                    continue;
                }
                let mut c = lagged_dot(zk, s, zl, 0, a, b);
                phi[(kc * l + s, lc * l)] = c;
                for t in 1..l - s {
                    let (i, j) = (s + t - 1, t - 1);
                    c += -at(zk, b as isize - i as isize) * zl[b - j] * f64::from(b >= j)
                        + at(zk, a as isize - 1 - i as isize) * at(zl, a as isize - 1 - j as isize);
                    phi[(kc * l + s + t, lc * l + t)] = c;
                }
            }
        }
    }
    // Truncated tail taps: recompute their rows and columns directly.
    for kc in 0..k {
        for i in 0..l {
            if !taps.is_tail(kc, i) {
                continue;
            }
            let yi = taps.signal(kc, i);
            for lc in 0..k {
                for j in 0..l {
                    let v = lagged_dot(yi, i, taps.signal(lc, j), j, a, b);
                    phi[(kc * l + i, lc * l + j)] = v;
                    phi[(lc * l + j, kc * l + i)] = v;
                }
            }
        }
    }
    // Mirror the upper block triangle.
    for kc in 0..k {
        for lc in kc + 1..k {
            for i in 0..l {
                for j in 0..l {
                    phi[(lc * l + j, kc * l + i)] = phi[(kc * l + i, lc * l + j)];
                }
            }
        }
    }
    let scale = 1.0 / count as f64;
    phi *= scale;
    let phi_rd = (0..k)
        .flat_map(|kc| (0..l).map(move |i| (kc, i)))
        .map(|(kc, i)| lagged_dot(taps.signal(kc, i), i, d, 0, a, b) * scale)
        .collect();
    Ok(CorrelationStats { phi_rr: phi, phi_rd, sample_count: count, filter_len: l })
}

/// Reference implementation: explicit `r(n)` vectors and outer products.
pub fn accumulate_stats_bruteforce(x: &[Vec<f64>], d: &[f64], g: &ImpulseResponse, l: usize, start: usize) -> Result<CorrelationStats> {
    let k = x.len();
    let n = d.len();
    if n <= l || n.saturating_sub(start) < l {
        return Err(AncError::InsufficientData(format!("{n} samples is not longer than L = {l}")));
    }
    let gt = crate::dsp::make_toeplitz(g, l)?;
    let dim = k * l;
    let mut phi = DMatrix::<f64>::zeros(dim, dim);
    let mut phi_rd = DVector::<f64>::zeros(dim);
    for t in start..n {
        let mut r = Vec::with_capacity(dim);
        for xk in x {
            let block: Vec<f64> = (0..l).map(|i| if t >= i { xk[t - i] } else { 0.0 }).collect();
            r.extend(gt.apply_transpose(&block));
        }
        let r = DVector::from_vec(r);
        phi += &r * r.transpose();
        phi_rd += &r * d[t];
    }
    let scale = 1.0 / (n - start) as f64;
    Ok(CorrelationStats { phi_rr: phi * scale, phi_rd: (phi_rd * scale).as_slice().to_vec(), sample_count: n - start, filter_len: l })
}

/// `λ_max(M) / ratio`, with `λ_max` from power iteration (relative tolerance 1e-6 or better).
pub fn eig_regularization(m: &DMatrix<f64>, ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(AncError::Configuration(format!("eigenvalue ratio must be positive, got {ratio}")));
    }
    Ok(largest_eigenvalue(m)? / ratio)
}

/// Largest-magnitude eigenvalue of a symmetric matrix by power iteration.
pub fn largest_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(AncError::InvalidDimension("matrix must be square".into()));
    }
    ensure_finite(m.as_slice(), "matrix")?;
    if m.iter().all(|&v| v == 0.0) {
        warn!("all-zero matrix: regularization factor set to 0");
        return Ok(0.0);
    }
    let n = m.nrows();
    // Deterministic start with components in every direction.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i as f64) * 0.7).sin());
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let mv = m * &v;
        let next = v.dot(&mv);
        let norm = mv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = mv / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    warn!("power iteration did not reach 1e-10 relative change; using last estimate");
    Ok(lambda)
}

/// How the two inner inverses are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    /// Cholesky, falling back to LU; singular systems are an error.
    #[default]
    Inverse,
    /// Moore-Penrose pseudoinverse with relative tolerance [`PINV_RELATIVE_TOLERANCE`].
    PseudoInverse,
}

/// Selection rule for the leak `β` and Tikhonov factor `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizationRule {
    /// `β = λ_max(Φ_rr)/ratio`, `ρ = λ_max(AᵀΦ⁻¹A)/ratio`.
    Eigen { ratio: f64 },
    /// `β = ρ = factor·σ_n²` with `σ_n²` the sensor-noise variance.
    SensorNoise { factor: f64 },
    Fixed { beta: f64, rho: f64 },
}

impl Default for RegularizationRule {
    fn default() -> Self {
        RegularizationRule::Eigen { ratio: 1e4 }
    }
}

/// The three additive parts of the optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct TermDecomposition {
    pub wiener: Vec<f64>,
    pub constraint: Vec<f64>,
    pub coupling: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub w_opt: Vec<f64>,
    pub beta: f64,
    pub rho: f64,
    pub residual_norm: f64,
    pub terms: TermDecomposition,
}

#[derive(Debug, Clone, Serialize)]
struct SolutionMetadata {
    beta: f64,
    rho: f64,
    residual_norm: f64,
    w_norm: f64,
    wiener_norm: f64,
    constraint_norm: f64,
    coupling_norm: f64,
    dim: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl OptimalSolution {
    /// Writes `w_opt.bin` (KL×1 matrix file) and `w_opt.json` metadata into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        write_matrix_bin(&dir.join("w_opt.bin"), &DMatrix::from_column_slice(self.w_opt.len(), 1, &self.w_opt))?;
        let meta = SolutionMetadata {
            beta: self.beta,
            rho: self.rho,
            residual_norm: self.residual_norm,
            w_norm: norm(&self.w_opt),
            wiener_norm: norm(&self.terms.wiener),
            constraint_norm: norm(&self.terms.constraint),
            coupling_norm: norm(&self.terms.coupling),
            dim: self.w_opt.len(),
        };
        std::fs::write(dir.join("w_opt.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Solves `X = M⁻¹ R` for symmetric `M`.
fn sym_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, mode: InverseMode, what: &str) -> Result<DMatrix<f64>> {
    match mode {
        InverseMode::Inverse => {
            if let Some(ch) = m.clone().cholesky() {
                return Ok(ch.solve(rhs));
            }
            m.clone()
                .lu()
                .solve(rhs)
                .ok_or_else(|| AncError::Numerical(format!("{what} is singular; increase the regularization or use the pseudoinverse")))
        }
        InverseMode::PseudoInverse => {
            let svd = m.clone().svd(true, true);
            let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
            let pinv = svd
                .pseudo_inverse(PINV_RELATIVE_TOLERANCE * s_max.max(f64::MIN_POSITIVE))
                .map_err(|e| AncError::Numerical(format!("{what}: {e}")))?;
            Ok(pinv * rhs)
        }
    }
}

/// Picks `(β, ρ)` by `rule` and solves.
pub fn solve_with_rule(
    stats: &CorrelationStats,
    g: &ImpulseResponse,
    constraint: &SpatialConstraint,
    rule: RegularizationRule,
    sensor_noise_power: f64,
    mode: InverseMode,
) -> Result<OptimalSolution> {
    let (beta, rho) = match rule {
        RegularizationRule::Fixed { beta, rho } => (beta, rho),
        RegularizationRule::SensorNoise { factor } => (factor * sensor_noise_power, factor * sensor_noise_power),
        RegularizationRule::Eigen { ratio } => {
            let beta = eig_regularization(&stats.phi_rr, ratio)?;
            let a = constraint.gt_h(g)?;
            let phi = &stats.phi_rr + DMatrix::identity(a.nrows(), a.nrows()) * beta;
            let b = sym_solve(&phi, &a, mode, "Φ_rr + βI")?;
            let m0 = a.transpose() * b;
            let m0 = (&m0 + m0.transpose()) * 0.5;
            (beta, eig_regularization(&m0, ratio)?)
        }
    };
    solve_optimal(stats, g, constraint, beta, rho, mode)
}

pub fn solve_optimal(
    stats: &CorrelationStats,
    g: &ImpulseResponse,
    constraint: &SpatialConstraint,
    beta: f64,
    rho: f64,
    mode: InverseMode,
) -> Result<OptimalSolution> {
    let dim = constraint.dim();
    if stats.phi_rr.nrows() != dim || stats.phi_rd.len() != dim {
        return Err(AncError::InvalidDimension(format!(
            "statistics have dimension {}, constraint {}",
            stats.phi_rr.nrows(),
            dim
        )));
    }
    if !(beta.is_finite() && beta >= 0.0 && rho.is_finite() && rho >= 0.0) {
        return Err(AncError::Configuration(format!("regularization factors must be non-negative (β={beta}, ρ={rho})")));
    }
    ensure_finite(stats.phi_rr.as_slice(), "Φ_rr")?;
    ensure_finite(&stats.phi_rd, "φ_rd")?;

    let a_mat = constraint.gt_h(g)?;
    let phi = &stats.phi_rr + DMatrix::identity(dim, dim) * beta;
    let mut rhs = DMatrix::zeros(dim, 1 + a_mat.ncols());
    rhs.set_column(0, &DVector::from_column_slice(&stats.phi_rd));
    rhs.columns_mut(1, a_mat.ncols()).copy_from(&a_mat);
    let sol = sym_solve(&phi, &rhs, mode, "Φ_rr + βI")?;
    let a_vec = sol.column(0).into_owned();
    let b_mat = sol.columns(1, a_mat.ncols()).into_owned();
    let l = a_mat.ncols();
    let m = a_mat.transpose() * &b_mat + DMatrix::identity(l, l) * rho;
    let m = (&m + m.transpose()) * 0.5;

    let f = DVector::from_column_slice(constraint.f());
    let ht_delta = DVector::from_vec(constraint.apply_ht(&constraint.delta_tilde()));
    let coupling_rhs = ht_delta - a_mat.transpose() * &a_vec;
    let mut rhs2 = DMatrix::zeros(l, 2);
    rhs2.set_column(0, &f);
    rhs2.set_column(1, &coupling_rhs);
    let minv = sym_solve(&m, &rhs2, mode, "AᵀΦ⁻¹A + ρI")?;

    let wiener: Vec<f64> = a_vec.iter().map(|v| -v).collect();
    let constraint_term = (&b_mat * minv.column(0)).as_slice().to_vec();
    let coupling: Vec<f64> = (&b_mat * minv.column(1)).iter().map(|v| -v).collect();
    let w_opt: Vec<f64> = (0..dim).map(|i| wiener[i] + constraint_term[i] + coupling[i]).collect();
    ensure_finite(&w_opt, "optimal filter")?;
    let residual_norm = constraint_residual(&w_opt, g, constraint)?;
    Ok(OptimalSolution {
        w_opt,
        beta,
        rho,
        residual_norm,
        terms: TermDecomposition { wiener, constraint: constraint_term, coupling },
    })
}

/// Dense saddle-point oracle: solves `[Φ_rr+βI, A; Aᵀ, −ρI][w; μ] = [−φ_rd; f − Hᵀδ̃]`
/// by SVD least squares (handles rank-deficient `A`).
pub fn kkt_oracle(stats: &CorrelationStats, g: &ImpulseResponse, constraint: &SpatialConstraint, beta: f64, rho: f64) -> Result<Vec<f64>> {
    let dim = constraint.dim();
    let a = constraint.gt_h(g)?;
    let l = a.ncols();
    let mut kkt = DMatrix::zeros(dim + l, dim + l);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(&(&stats.phi_rr + DMatrix::identity(dim, dim) * beta));
    kkt.view_mut((0, dim), (dim, l)).copy_from(&a);
    kkt.view_mut((dim, 0), (l, dim)).copy_from(&a.transpose());
    kkt.view_mut((dim, dim), (l, l)).copy_from(&(DMatrix::identity(l, l) * -rho));
    let mut rhs = DVector::zeros(dim + l);
    for (i, v) in stats.phi_rd.iter().enumerate() {
        rhs[i] = -v;
    }
    for (i, v) in constraint.target_offset().iter().enumerate() {
        rhs[dim + i] = *v;
    }
    let svd = kkt.svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let sol = svd.solve(&rhs, 1e-12 * s_max).map_err(|e| AncError::Numerical(e.to_string()))?;
    Ok(sol.rows(0, dim).iter().copied().collect())
}
