//! Closed-form results for the far-detuned Λ system and the tripod.
//!
//! All frequencies are angular. Detunings follow the crate convention (positive when
//! the laser is below the transition); `Δ₁` and `Δ₂` refer to |A₁⟩ and |A₂⟩.

use nalgebra::Vector4;
use num_complex::Complex64 as C64;

use crate::{Error, Result};

/// Default threshold below which [`adiabaticity_check`] counts as adiabatic.
pub const DEFAULT_ADIABATICITY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhotonParams {
    pub omega_plus: C64,
    pub omega_minus: C64,
    delta1: f64,
    pub delta2: f64,
    /// Excited-state decay rate (1/s).
    pub gamma: f64,
    /// Standard deviation of the static detuning jitter.
    pub jitter: f64,
}

impl TwoPhotonParams {
    /// `a1_offset` is the |A₁⟩ transition frequency minus the |A₂⟩ one, so that
    /// `Δ₁ = Δ₂ + a1_offset`.
    pub fn new(omega_plus: C64, omega_minus: C64, delta2: f64, a1_offset: f64, gamma: f64, jitter: f64) -> Self {
        Self { omega_plus, omega_minus, delta1: delta2 + a1_offset, delta2, gamma, jitter }
    }

    pub fn delta1(&self) -> f64 {
        self.delta1
    }

    pub fn a1_offset(&self) -> f64 {
        self.delta1 - self.delta2
    }

    /// Same parameters with both amplitudes scaled by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { omega_plus: self.omega_plus * c, omega_minus: self.omega_minus * c, ..*self }
    }

    fn check_detunings(&self) -> Result<()> {
        if self.delta1 == 0.0 || self.delta2 == 0.0 || !self.delta1.is_finite() || !self.delta2.is_finite() {
            return Err(Error::Domain(format!(
                "detunings must be finite and nonzero (Δ₁ = {}, Δ₂ = {})",
                self.delta1, self.delta2
            )));
        }
        Ok(())
    }
}

/// `Ω′ = Ω₊* Ω₋ (1/Δ₂ − 1/Δ₁)`.
pub fn two_photon_rabi(p: &TwoPhotonParams) -> Result<C64> {
    p.check_detunings()?;
    Ok(p.omega_plus.conj() * p.omega_minus * (1.0 / p.delta2 - 1.0 / p.delta1))
}

/// Single-excited-state limit `Ω₊* Ω₋ / Δ₂`, i.e. without the |A₁⟩ path.
pub fn two_photon_rabi_without_a1(p: &TwoPhotonParams) -> Result<C64> {
    p.check_detunings()?;
    Ok(p.omega_plus.conj() * p.omega_minus / p.delta2)
}

/// `Γ = |Ω₊||Ω₋| |1/Δ₂² − 1/Δ₁²| δ_Δ`: first-order sensitivity of Ω′ to a common
/// detuning shift, times the jitter width.
pub fn two_photon_decay(p: &TwoPhotonParams) -> Result<f64> {
    p.check_detunings()?;
    let s = (1.0 / (p.delta2 * p.delta2) - 1.0 / (p.delta1 * p.delta1)).abs();
    Ok(p.omega_plus.norm() * p.omega_minus.norm() * s * p.jitter)
}

/// `max(|Ω₊|², |Ω₋|²) γ / (Δ₂² |Ω′|)`: excited-state scattering per two-photon cycle.
pub fn adiabaticity_check(p: &TwoPhotonParams) -> Result<f64> {
    let w = two_photon_rabi(p)?.norm();
    if w == 0.0 {
        return Err(Error::Domain("two-photon Rabi frequency vanishes".into()));
    }
    let m = p.omega_plus.norm_sqr().max(p.omega_minus.norm_sqr());
    Ok(m * p.gamma / (p.delta2 * p.delta2 * w))
}

pub fn is_adiabatic(p: &TwoPhotonParams, threshold: f64) -> Result<bool> {
    Ok(adiabaticity_check(p)? < threshold)
}

/// Dark states `|D±⟩ = (Ω₀|±1⟩ − Ω±|0⟩)/√(|Ω₀|²+|Ω±|²)` in the tripod basis
/// `(|0⟩, |+1⟩, |−1⟩, |A₂⟩)`.
pub fn dark_states(omega0: C64, omega_plus: C64, omega_minus: C64) -> Result<[Vector4<C64>; 2]> {
    let make = |om: C64, slot: usize| -> Result<Vector4<C64>> {
        let n = (omega0.norm_sqr() + om.norm_sqr()).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain("dark state undefined when both couplings vanish".into()));
        }
        let mut v = Vector4::<C64>::zeros();
        v[0] = -om / n;
        v[slot] = omega0 / n;
        Ok(v)
    };
    Ok([make(omega_plus, 1)?, make(omega_minus, 2)?])
}

/// State orthogonal to `|D±⟩` within `span{|0⟩, |±1⟩}`; `plus` selects the branch.
/// Its bra is proportional to the coupling row `Ω₀⟨0| + Ω±⟨±1|`.
pub fn bright_partner(omega0: C64, omega_pm: C64, plus: bool) -> Result<Vector4<C64>> {
    let n = (omega0.norm_sqr() + omega_pm.norm_sqr()).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("bright state undefined when both couplings vanish".into()));
    }
    let mut v = Vector4::<C64>::zeros();
    v[0] = omega0.conj() / n;
    v[if plus { 1 } else { 2 }] = omega_pm.conj() / n;
    Ok(v)
}

/// Modulation frequencies of the two dark lines, `Δ_ZFS ∓ δ/2`, in ascending order.
pub fn dark_line_positions(zfs: f64, zeeman: f64) -> Result<[f64; 2]> {
    if !(zeeman >= 0.0) {
        return Err(Error::Domain(format!("Zeeman splitting must be non-negative, got {zeeman}")));
    }
    Ok([zfs - 0.5 * zeeman, zfs + 0.5 * zeeman])
}
