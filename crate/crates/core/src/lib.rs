//! Spatially selective active noise control.
//!
//! A hybrid (feedforward plus feedback) ANC controller whose filter is constrained so that
//! sound arriving from one chosen direction reaches the error microphone unaltered while
//! noise from every other direction is cancelled. The crate contains the closed-form
//! optimal solution, the projected adaptive controller, reference systems used for
//! comparison, evaluation metrics and an experiment harness driving it all on a
//! synthetic free-field scene.

pub mod adaptive;
pub mod baselines;
pub mod constraint;
pub mod dsp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optimal;
pub mod harness;
pub mod scene;

pub use error::{AncError, DivergenceReport, Result};
