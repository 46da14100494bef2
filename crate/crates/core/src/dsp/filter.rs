//! FIR filtering, fractional delays, minimum-phase design and zero-phase IIR helpers.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use super::signal::{ImpulseResponse, Signal};
use crate::error::{AncError, Result};

/// Half-width (taps each side of the centre) of the fractional-delay kernel.
pub const FRACTIONAL_DELAY_HALF_WIDTH: usize = 16;
/// Kaiser shape parameter of the fractional-delay window.
pub const FRACTIONAL_DELAY_KAISER_BETA: f64 = 5.0;

/// `y(n) = Σ_m ir(m) x(n - m)` with zero initial state; output has the length of `x`.
pub fn fir_filter(ir: &ImpulseResponse, x: &Signal) -> Result<Signal> {
    if ir.sample_rate() != x.sample_rate() {
        return Err(AncError::Configuration(format!(
            "sample-rate mismatch: filter at {} Hz, signal at {} Hz",
            ir.sample_rate(),
            x.sample_rate()
        )));
    }
    Ok(Signal::from_raw(filter_slice(ir.taps(), x.samples()), x.sample_rate()))
}

/// Causal FIR filtering of a raw slice (zero prehistory, output truncated to input length).
pub fn filter_slice(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut y = vec![0.0; n];
    for (m, &h) in taps.iter().enumerate() {
        if h == 0.0 || m >= n {
            continue;
        }
        for (out, &xi) in y[m..].iter_mut().zip(x) {
            *out += h * xi;
        }
    }
    y
}

fn bessel_i0(x: f64) -> f64 {
    // Power series; converges quickly for the window parameters used here.
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc interpolation kernel centred at `delay` samples.
///
/// Taps that would fall before index 0 are dropped, so delays smaller than the
/// half-width give a truncated (still causal) kernel.
pub fn fractional_delay_ir(delay: f64, length: usize, fs: f64) -> Result<ImpulseResponse> {
    fractional_delay_ir_with(delay, length, fs, FRACTIONAL_DELAY_HALF_WIDTH)
}

pub fn fractional_delay_ir_with(delay: f64, length: usize, fs: f64, half_width: usize) -> Result<ImpulseResponse> {
    if !delay.is_finite() || delay < 0.0 {
        return Err(AncError::Causality(format!("negative or non-finite delay {delay}")));
    }
    if delay >= length as f64 {
        return Err(AncError::Causality(format!("delay {delay} does not fit in {length} taps")));
    }
    if delay + half_width as f64 >= length as f64 {
        return Err(AncError::Causality(format!(
            "delay {delay} plus window half-width {half_width} exceeds {length} taps"
        )));
    }
    let mut taps = vec![0.0; length];
    let rounded = delay.round();
    if (delay - rounded).abs() < 1e-12 {
        taps[rounded as usize] = 1.0;
        return ImpulseResponse::new(taps, fs);
    }
    let hw = half_width as f64;
    let norm = bessel_i0(FRACTIONAL_DELAY_KAISER_BETA);
    let lo = (delay - hw).ceil().max(0.0) as usize;
    let hi = ((delay + hw).floor() as usize).min(length - 1);
    for (n, tap) in taps.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let t = n as f64 - delay;
        let r = t / hw;
        let w = bessel_i0(FRACTIONAL_DELAY_KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
        *tap = sinc(t) * w;
    }
    ImpulseResponse::new(taps, fs)
}

fn fft_len_for(length: usize) -> usize {
    (16 * length).max(1 << 14).next_power_of_two()
}

/// Minimum-phase FIR whose magnitude follows `magnitude(f_hz)`.
///
/// Real-cepstrum folding: the log-magnitude on a dense grid is turned into a
/// cepstrum, the anti-causal part is folded onto the causal part and the
/// result exponentiated back. Magnitudes are floored at -120 dB before the log.
pub fn min_phase_from_magnitude<F>(magnitude: F, fs: f64, length: usize) -> Result<ImpulseResponse>
where
    F: Fn(f64) -> f64,
{
    if length == 0 {
        return Err(AncError::InvalidDimension("filter length must be at least 1".into()));
    }
    let n = fft_len_for(length);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut buf: Vec<Complex64> = (0..n)
        .map(|k| {
            let bin = if k <= n / 2 { k } else { n - k };
            let f = bin as f64 * fs / n as f64;
            Complex64::new(magnitude(f).abs().max(1e-6).ln(), 0.0)
        })
        .collect();
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let re = c.re * scale;
        let folded = if k == 0 || k == n / 2 {
            re
        } else if k < n / 2 {
            2.0 * re
        } else {
            0.0
        };
        *c = Complex64::new(folded, 0.0);
    }
    fft.process(&mut buf);
    for c in buf.iter_mut() {
        *c = c.exp();
    }
    ifft.process(&mut buf);
    let taps: Vec<f64> = buf.iter().take(length).map(|c| c.re * scale).collect();
    ImpulseResponse::new(taps, fs)
}

/// Magnitude of the analog Butterworth high-pass prototype of `order` at `f`.
pub fn butterworth_highpass_magnitude(f: f64, cutoff: f64, order: u32) -> f64 {
    let r = (f / cutoff).powi(2 * order as i32);
    (r / (1.0 + r)).sqrt()
}

/// Order of the Butterworth magnitude template behind [`min_phase_highpass`].
pub const MIN_PHASE_HIGHPASS_ORDER: u32 = 4;

/// Minimum-phase high-pass FIR: fourth-order Butterworth magnitude template,
/// made minimum phase by cepstral folding and truncated to `length` taps.
pub fn min_phase_highpass(cutoff: f64, fs: f64, length: usize) -> Result<ImpulseResponse> {
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(AncError::Configuration(format!(
            "high-pass cutoff {cutoff} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    let h = min_phase_from_magnitude(|f| butterworth_highpass_magnitude(f, cutoff, MIN_PHASE_HIGHPASS_ORDER), fs, length)?;
    pull_zeros_inside(h)
}

/// Truncating a minimum-phase response can push zeros slightly outside the unit
/// circle. Scaling tap `n` by `r^n` moves every zero radially by `r`; this is
/// repeated until the root check passes.
fn pull_zeros_inside(h: ImpulseResponse) -> Result<ImpulseResponse> {
    let mut taps = h.taps().to_vec();
    for _ in 0..8 {
        let max_root = max_zero_magnitude(&taps);
        if max_root <= 1.0 {
            return ImpulseResponse::new(taps, h.sample_rate());
        }
        let r = (1.0 - 1e-7) / max_root;
        let mut rn = 1.0;
        for t in taps.iter_mut() {
            *t *= rn;
            rn *= r;
        }
    }
    Err(AncError::NotMinimumPhase { max_root: max_zero_magnitude(&taps) })
}

/// Roots of `Σ_m taps[m] z^{-m}` (zeros of the transfer function), via companion-matrix eigenvalues.
///
/// Leading zero taps are a pure delay and contribute no finite zeros; trailing
/// zero taps contribute zeros at the origin.
pub fn transfer_zeros(taps: &[f64]) -> Vec<Complex64> {
    let tol = 0.0;
    let first = match taps.iter().position(|t| t.abs() > tol) {
        Some(i) => i,
        None => return Vec::new(),
    };
    let last = taps.iter().rposition(|t| t.abs() > tol).unwrap_or(first);
    let core = &taps[first..=last];
    let mut zeros = vec![Complex64::new(0.0, 0.0); taps.len() - 1 - last];
    let degree = core.len() - 1;
    if degree == 0 {
        return zeros;
    }
    // Monic polynomial z^degree + a1 z^(degree-1) + ... with a_i = core[i] / core[0].
    let lead = core[0];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -core[j + 1] / lead;
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    zeros.extend(companion.complex_eigenvalues().iter().copied());
    zeros
}

/// Largest zero magnitude of the FIR transfer function (0 for a pure delay).
pub fn max_zero_magnitude(taps: &[f64]) -> f64 {
    transfer_zeros(taps).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Tolerance on zero magnitudes used by the minimum-phase check.
pub const MIN_PHASE_TOLERANCE: f64 = 1e-6;

pub fn is_minimum_phase(ir: &ImpulseResponse) -> bool {
    max_zero_magnitude(ir.taps()) <= 1.0 + MIN_PHASE_TOLERANCE
}

/// Second-order IIR section in direct form I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Bilinear-transform Butterworth (Q = 1/√2) low-pass.
    pub fn lowpass(cutoff: f64, fs: f64) -> Self {
        let k = (PI * cutoff / fs).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        let b0 = k * k * norm;
        Biquad { b: [b0, 2.0 * b0, b0], a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm] }
    }

    /// Bilinear-transform Butterworth (Q = 1/√2) high-pass.
    pub fn highpass(cutoff: f64, fs: f64) -> Self {
        let k = (PI * cutoff / fs).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        Biquad { b: [norm, -2.0 * norm, norm], a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm] }
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }

    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// Zero-phase band selection: second-order Butterworth edges run forward and backward,
/// giving a fourth-order magnitude roll-off at each edge. `lo <= 0` skips the high-pass
/// edge and `hi >= fs/2` skips the low-pass edge.
#[derive(Debug, Clone)]
pub struct ZeroPhaseBand {
    sections: Vec<Biquad>,
    pad: usize,
}

impl ZeroPhaseBand {
    pub fn new(lo: f64, hi: f64, fs: f64) -> Result<Self> {
        let nyq = fs / 2.0;
        if !(lo < hi) || hi <= 0.0 || lo >= nyq {
            return Err(AncError::Configuration(format!("empty band [{lo}, {hi}] Hz at fs = {fs} Hz")));
        }
        let mut sections = Vec::new();
        let mut slowest = f64::INFINITY;
        if lo > 0.0 {
            sections.push(Biquad::highpass(lo, fs));
            slowest = slowest.min(lo);
        }
        if hi < nyq {
            sections.push(Biquad::lowpass(hi, fs));
            slowest = slowest.min(hi);
        }
        let pad = if slowest.is_finite() { (3.0 * fs / slowest).ceil() as usize } else { 0 };
        Ok(Self { sections, pad })
    }

    pub fn highpass(cutoff: f64, fs: f64) -> Result<Self> {
        Self::new(cutoff, fs, fs)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.sections.is_empty() || x.len() < 2 {
            return x.to_vec();
        }
        let n = x.len();
        let pad = self.pad.min(n - 1);
        // Odd reflection about the end points limits edge transients.
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let mut y = ext;
        for s in &self.sections {
            y = s.process(&y);
        }
        y.reverse();
        for s in &self.sections {
            y = s.process(&y);
        }
        y.reverse();
        y[pad..pad + n].to_vec()
    }

    /// Power gain `|H(f)|²` of the zero-phase cascade.
    pub fn power_gain(&self, freq: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.response(freq, fs).norm_sqr()).product::<f64>().powi(2)
    }
}
