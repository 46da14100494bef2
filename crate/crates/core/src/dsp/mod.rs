//! Signal-processing primitives: Toeplitz convolution operators, FIR filtering,
//! fractional delays, minimum-phase design, test signals and spectral estimation.

pub mod filter;
pub mod generate;
pub mod signal;
pub mod spectrum;
pub mod toeplitz;
pub mod wav;

pub use filter::{
    fir_filter, fractional_delay_ir, fractional_delay_ir_with, is_minimum_phase, max_zero_magnitude,
    min_phase_from_magnitude, min_phase_highpass, ZeroPhaseBand,
};
pub use generate::{gen_signal, SignalKind};
pub use signal::{ImpulseResponse, Signal};
pub use spectrum::{welch_psd, welch_psd_slice, Spectrum};
pub use toeplitz::{make_toeplitz, ToeplitzOperator};
pub use wav::read_wav_mono;
