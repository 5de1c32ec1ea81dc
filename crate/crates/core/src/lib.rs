//! Simulation of the negatively charged nitrogen-vacancy center: fine structure of
//! the ground and optically excited triplets, Lindblad dynamics under optical and
//! microwave driving, and recipes for all-optical spin control experiments.
//!
//! Frequencies are angular (rad/s) and times are seconds everywhere inside the
//! library. Configuration files use plain Hz and are converted once on load.
//!
//! Rabi amplitudes follow the convention `H = -Ω (|e⟩⟨g| + h.c.)`: a resonant
//! two-level system driven with amplitude `Ω` oscillates in population as
//! `sin²(Ω t)`, i.e. at angular frequency `2Ω`. Detunings are positive when the
//! laser sits below the transition.

pub mod analytics;
pub mod cli;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod fit;
pub mod levels;

pub use error::{Error, Result};

/// 2π, kept as a named constant since nearly every value is quoted as `2π × f`.
pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Converts a frequency quoted in Hz to angular frequency.
#[inline]
pub fn hz(f: f64) -> f64 {
    TWO_PI * f
}

/// Converts an angular frequency back to Hz.
#[inline]
pub fn to_hz(w: f64) -> f64 {
    w / TWO_PI
}
