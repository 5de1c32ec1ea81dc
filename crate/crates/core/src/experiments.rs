//! End-to-end recipes: excitation spectra, optical pumping, π-pulse readout,
//! microwave Rabi, two-photon Rabi with power scans, and the tripod dark-resonance map.
//!
//! Scan points run in parallel and are assembled by index; random detuning samples are
//! drawn from per-sample ChaCha streams so the thread count never changes a result.

use nalgebra::Vector4;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analytics::{self, TwoPhotonParams};
use crate::constants::Constants;
use crate::dynamics::{
    integrated_occupation, liouvillian, occupation_functional, propagate, propagator, steady_state, CMatrix, CVector, CollapseChannel,
    DensityMatrix, Liouvillian,
};
use crate::fields::{
    compile_probe, compile_segment, tripod_liouvillian, Branching, CompileOptions, CompiledSegment, DriveField,
    MicrowaveDrive, Polarization, PulseSegment, TripodParams, TRIPOD_EXCITED,
};
use crate::fit::{fit_damped_cosine_shaped, fit_line_through_origin, DampedCosineFit, DecayShape, OriginLine};
use crate::levels::{calibrate_strain_for_gap, ExcitedParams, GroundParams, LevelModel, StateLabel, NUM_STATES};
use crate::{to_hz, Error, Result};

/// Indices of the six excited levels in the nine-level basis.
pub const EXCITED: [usize; 6] = [3, 4, 5, 6, 7, 8];

/// Level model plus the incoherent processes shared by every recipe.
#[derive(Debug, Clone)]
pub struct NvSetup {
    pub model: LevelModel,
    /// Total excited-state decay rate γ (1/s).
    pub gamma: f64,
    pub branching: Branching,
    pub cutoff: f64,
    /// Pure dephasing rate of the |±1⟩ ground levels (1/s).
    pub ground_dephasing: f64,
    /// Detected fraction of emitted photons.
    pub efficiency: f64,
    pub constants_version: String,
}

impl NvSetup {
    pub fn new(model: LevelModel, constants: &Constants) -> Self {
        Self {
            model,
            gamma: constants.excited_decay_rate,
            branching: Branching::default(),
            cutoff: CompileOptions::default().cutoff,
            ground_dephasing: 0.0,
            efficiency: 1.0,
            constants_version: constants.version.clone(),
        }
    }

    /// Strain calibrated so that the A₁–A₂ gap equals the tabulated value.
    pub fn calibrated(constants: &Constants, zeeman: f64) -> Result<Self> {
        let base = ExcitedParams::from_constants(constants);
        let strain = calibrate_strain_for_gap(&base, constants.a1_a2_gap)?;
        let ground = GroundParams::new(constants.zero_field_splitting, zeeman)?;
        Ok(Self::new(LevelModel::new(ground, base.with_strain(strain, 0.0))?, constants))
    }

    pub fn validate(&self) -> Result<()> {
        self.branching.validate()?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("decay rate must be non-negative, got {}", self.gamma)));
        }
        if !(self.ground_dephasing.is_finite() && self.ground_dephasing >= 0.0) {
            return Err(Error::Config("ground dephasing rate must be non-negative".into()));
        }
        if !(self.efficiency.is_finite() && self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config(format!("collection efficiency must lie in (0, 1], got {}", self.efficiency)));
        }
        Ok(())
    }

    pub fn channels_with(&self, branching: &Branching) -> Result<Vec<CollapseChannel>> {
        let mut ch = branching.channels(self.gamma)?;
        if self.ground_dephasing > 0.0 {
            for g in [StateLabel::GPlus, StateLabel::GMinus] {
                ch.push(CollapseChannel::dephasing(NUM_STATES, g.index(), self.ground_dephasing)?);
            }
        }
        Ok(ch)
    }

    pub fn channels(&self) -> Result<Vec<CollapseChannel>> {
        self.channels_with(&self.branching)
    }

    pub fn segment(&self, duration: f64) -> Result<PulseSegment> {
        Ok(PulseSegment::new(duration).with_channels(self.channels()?))
    }

    pub fn compile(&self, seg: &PulseSegment) -> Result<CompiledSegment> {
        compile_segment(seg, &self.model, &CompileOptions { cutoff: self.cutoff })
    }

    /// Free evolution (no drive) generator.
    pub fn dark_liouvillian(&self) -> Result<Liouvillian> {
        liouvillian(&CMatrix::zeros(NUM_STATES, NUM_STATES), &self.channels()?)
    }

    /// Polarization driving `source`→|A₂⟩ with no coupling from the other |±1⟩ level.
    pub fn selective_polarization(&self, source: StateLabel) -> Result<Polarization> {
        let other = match source {
            StateLabel::GPlus => StateLabel::GMinus,
            StateLabel::GMinus => StateLabel::GPlus,
            _ => return Err(Error::Config(format!("selective |A₂⟩ polarization needs |±1⟩, got {source}"))),
        };
        let find = |g| {
            self.model.transition(g, StateLabel::A2).ok_or_else(|| Error::Config(format!("{g}→A2 has no dipole")))
        };
        Polarization::selective(find(source)?, find(other)?)
    }

    pub fn ground_mixture(&self) -> DensityMatrix {
        let mut p = [0.0; NUM_STATES];
        p[..3].fill(1.0 / 3.0);
        DensityMatrix::diagonal(&p).expect("valid mixture")
    }
}

fn excited_population(rho: &DensityMatrix) -> f64 {
    EXCITED.iter().map(|&k| rho.population(k)).sum()
}

fn coupling_amplitude(c: &CompiledSegment, g: StateLabel, e: StateLabel) -> Option<C64> {
    c.couplings.iter().find(|x| x.from == g && x.to == e).map(|x| x.amplitude)
}

/// Linear functional returning the detected photon number for an initial state.
#[derive(Debug, Clone)]
pub struct Readout {
    functional: CVector,
    pub pulse_duration: f64,
    /// |coupling| on the addressed transition.
    pub coupling: f64,
}

impl Readout {
    pub fn photons(&self, rho: &DensityMatrix) -> f64 {
        self.functional.dot(&rho.to_vector()).re
    }

    fn from_segment(setup: &NvSetup, compiled: &CompiledSegment, collect: f64, coupling: f64) -> Result<Self> {
        let l1 = compiled.liouvillian()?;
        let t1 = compiled.duration;
        let f1 = occupation_functional(&l1, &EXCITED, t1);
        let mut f = f1;
        if collect > 0.0 {
            let l2 = setup.dark_liouvillian()?;
            let f2 = occupation_functional(&l2, &EXCITED, collect);
            f += propagator(&l1, t1).transpose() * f2;
        }
        Ok(Self { functional: f * C64::new(setup.gamma * setup.efficiency, 0.0), pulse_duration: t1, coupling })
    }
}

/// Optical π pulse on `ground → excited` followed by a collection window of `collect`.
/// With `H = −Ω(|e⟩⟨g| + h.c.)` the population transfer is `sin²(Ωt)`, so the pulse
/// lasts `π/(2|Ω|)` for the compiled coupling `Ω`.
pub fn pi_pulse_readout(
    setup: &NvSetup,
    ground: StateLabel,
    excited: StateLabel,
    polarization: Polarization,
    coupling: f64,
    collect: f64,
) -> Result<Readout> {
    let compiled = pi_pulse_segment(setup, ground, excited, polarization, coupling)?;
    Readout::from_segment(setup, &compiled, collect, coupling)
}

/// The compiled π pulse used by [`pi_pulse_readout`].
pub fn pi_pulse_segment(
    setup: &NvSetup,
    ground: StateLabel,
    excited: StateLabel,
    polarization: Polarization,
    coupling: f64,
) -> Result<CompiledSegment> {
    let t = setup.model.transition(ground, excited).ok_or_else(|| {
        Error::Config(format!("readout transition {ground}→{excited} has no dipole"))
    })?;
    let a = polarization.project(t).norm();
    if a == 0.0 {
        return Err(Error::Config(format!("readout polarization does not couple {ground}→{excited}")));
    }
    if !(coupling > 0.0) {
        return Err(Error::Config("readout coupling must be positive".into()));
    }
    let duration = std::f64::consts::FRAC_PI_2 / coupling;
    let seg = setup.segment(duration)?.with_drive(DriveField::new((ground, excited), 0.0, polarization, coupling / a));
    setup.compile(&seg)
}

/// Resonant readout of fixed duration (e.g. the cycling |0⟩→|Eₓ⟩ line).
pub fn pulse_readout(
    setup: &NvSetup,
    ground: StateLabel,
    excited: StateLabel,
    polarization: Polarization,
    rabi: f64,
    duration: f64,
) -> Result<Readout> {
    let seg = setup.segment(duration)?.with_drive(DriveField::new((ground, excited), 0.0, polarization, rabi));
    let compiled = setup.compile(&seg)?;
    let coupling = coupling_amplitude(&compiled, ground, excited).map(|c| c.norm()).unwrap_or(0.0);
    Readout::from_segment(setup, &compiled, 10.0 / setup.gamma.max(1e-300), coupling)
}

/// Photon number of a π-pulse readout on `ρ`. The pulse addresses whichever of
/// |±1⟩→|A₂⟩ the polarization couples more strongly; the photons then measure the
/// population of the superposition of |±1⟩ that this polarization selects.
pub fn run_pi_pulse_readout(setup: &NvSetup, rho: &DensityMatrix, polarization: Polarization, coupling: f64) -> Result<f64> {
    let weight = |g| setup.model.transition(g, StateLabel::A2).map(|t| polarization.project(t).norm()).unwrap_or(0.0);
    let ground = if weight(StateLabel::GMinus) > weight(StateLabel::GPlus) { StateLabel::GMinus } else { StateLabel::GPlus };
    let r = pi_pulse_readout(setup, ground, StateLabel::A2, polarization, coupling, 10.0 / setup.gamma.max(1e-300))?;
    Ok(r.photons(rho))
}

/// Evenly spaced axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn linspace(name: &str, unit: &str, start: f64, stop: f64, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config(format!("axis `{name}` needs at least 2 points, got {points}")));
        }
        if !(start.is_finite() && stop.is_finite()) {
            return Err(Error::Config(format!("axis `{name}` bounds must be finite")));
        }
        let values = (0..points).map(|k| start + (stop - start) * k as f64 / (points - 1) as f64).collect();
        Ok(Self { name: name.into(), unit: unit.into(), values })
    }

    pub fn explicit(name: &str, unit: &str, values: Vec<f64>) -> Self {
        Self { name: name.into(), unit: unit.into(), values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    /// Population-valued columns are checked against [0, 1].
    pub population: bool,
}

/// Tabular result of a scan: observable columns over the Cartesian product of the axes
/// (first axis slowest), plus fit summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub axes: Vec<Axis>,
    pub columns: Vec<Column>,
    pub fits: serde_json::Value,
    pub constants_version: String,
    pub seed: u64,
}

impl ScanResult {
    pub fn rows(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.name == name).map(|c| c.values.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        for c in &self.columns {
            if c.values.len() != n {
                return Err(Error::Invariant(format!("column `{}` has {} rows, axes give {n}", c.name, c.values.len())));
            }
            if c.population && c.values.iter().any(|v| !(*v >= -1e-6 && *v <= 1.0 + 1e-6)) {
                return Err(Error::Invariant(format!("column `{}` leaves [0, 1]", c.name)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<String> = self
            .axes
            .iter()
            .map(|a| if a.unit.is_empty() { a.name.clone() } else { format!("{}_{}", a.name, a.unit) })
            .chain(self.columns.iter().map(|c| c.name.clone()))
            .collect();
        out.push_str(&names.join(","));
        out.push('\n');
        let dims: Vec<usize> = self.axes.iter().map(|a| a.values.len()).collect();
        for row in 0..self.rows() {
            let mut idx = vec![0; dims.len()];
            let mut r = row;
            for d in (0..dims.len()).rev() {
                idx[d] = r % dims[d];
                r /= dims[d];
            }
            let mut fields: Vec<String> = self.axes.iter().zip(&idx).map(|(a, &i)| format!("{:e}", a.values[i])).collect();
            fields.extend(self.columns.iter().map(|c| format!("{:e}", c.values[row])));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Photoluminescence excitation

#[derive(Debug, Clone, PartialEq)]
pub enum PleMode {
    /// Continuous excitation with incoherent microwave mixing; steady-state fluorescence.
    Steady,
    /// Fluorescence integrated over `dwell` starting from the given ground populations.
    Pulsed { dwell: f64, initial: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PleConfig {
    /// Laser frequency range (rad/s, same reference as the transition table).
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    pub rabi: f64,
    pub polarization: Polarization,
    /// Incoherent |0⟩ ↔ |±1⟩ mixing rate from the CW microwave (1/s); 0 = microwave off.
    pub mixing_rate: f64,
    pub mode: PleMode,
}

impl Default for PleConfig {
    fn default() -> Self {
        Self {
            start: crate::hz(-9e9),
            stop: crate::hz(9e9),
            points: 9001,
            rabi: crate::hz(5e6),
            polarization: Polarization::linear(std::f64::consts::FRAC_PI_4),
            mixing_rate: 1e7,
            mode: PleMode::Steady,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PeakMatch {
    pub frequency_hz: f64,
    pub ground: Option<StateLabel>,
    pub excited: Option<StateLabel>,
    pub table_frequency_hz: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PleResult {
    pub laser: Vec<f64>,
    pub fluorescence: Vec<f64>,
    pub excited_population: Vec<f64>,
    pub peaks: Vec<PeakMatch>,
}

fn mixing_channels(rate: f64) -> Result<Vec<CollapseChannel>> {
    let mut out = Vec::new();
    if rate > 0.0 {
        for g in [StateLabel::GPlus, StateLabel::GMinus] {
            out.push(CollapseChannel::decay(NUM_STATES, StateLabel::G0.index(), g.index(), rate)?);
            out.push(CollapseChannel::decay(NUM_STATES, g.index(), StateLabel::G0.index(), rate)?);
        }
    }
    Ok(out)
}

/// Interior local maxima of `y`, with plateaus counted once at their first point.
pub fn local_maxima(y: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = y.len();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Interior local minima of `y`.
pub fn local_minima(y: &[f64]) -> Vec<usize> {
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    local_maxima(&neg)
}

impl PleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::Config("a PLE scan needs at least 2 points".into()));
        }
        if !(self.start.is_finite() && self.stop.is_finite() && self.start < self.stop) {
            return Err(Error::Config("PLE scan bounds must be finite with start < stop".into()));
        }
        if !(self.rabi.is_finite() && self.rabi >= 0.0) {
            return Err(Error::Config("probe Rabi amplitude must be non-negative".into()));
        }
        if !(self.mixing_rate.is_finite() && self.mixing_rate >= 0.0) {
            return Err(Error::Config("microwave mixing rate must be non-negative".into()));
        }
        self.polarization.validate()?;
        if let PleMode::Pulsed { dwell, initial } = &self.mode {
            if !(*dwell > 0.0) {
                return Err(Error::Config("PLE dwell time must be positive".into()));
            }
            check_ground_populations(initial)?;
        }
        Ok(())
    }
}

fn check_ground_populations(p: &[f64; 3]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("initial ground populations must be non-negative and sum to 1, got {p:?}")));
    }
    Ok(())
}

pub fn run_ple_scan(setup: &NvSetup, cfg: &PleConfig) -> Result<PleResult> {
    setup.validate()?;
    cfg.validate()?;
    let mut channels = setup.channels()?;
    if matches!(cfg.mode, PleMode::Steady) {
        channels.extend(mixing_channels(cfg.mixing_rate)?);
    }
    let laser: Vec<f64> = Axis::linspace("laser", "", cfg.start, cfg.stop, cfg.points)?.values;
    let initial = match &cfg.mode {
        PleMode::Pulsed { dwell, initial } => {
            if !(*dwell > 0.0) {
                return Err(Error::Config("PLE dwell time must be positive".into()));
            }
            let mut p = [0.0; NUM_STATES];
            p[..3].copy_from_slice(initial);
            Some(DensityMatrix::diagonal(&p)?)
        }
        PleMode::Steady => None,
    };
    let values: Vec<Result<f64>> = laser
        .par_iter()
        .map(|&w| {
            let dwell = match cfg.mode {
                PleMode::Pulsed { dwell, .. } => dwell,
                PleMode::Steady => 1.0,
            };
            let c = compile_probe(&setup.model, w, cfg.polarization, cfg.rabi, dwell, channels.clone())?;
            let l = c.liouvillian()?;
            match &initial {
                None => {
                    let ss = steady_state(&l)?;
                    ss.rho.check()?;
                    Ok(excited_population(&ss.rho))
                }
                Some(rho0) => Ok(integrated_occupation(&l, rho0, &EXCITED, dwell)? / dwell),
            }
        })
        .collect();
    let excited_population: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let scale = setup.gamma * setup.efficiency * match cfg.mode {
        PleMode::Pulsed { dwell, .. } => dwell,
        PleMode::Steady => 1.0,
    };
    let fluorescence: Vec<f64> = excited_population.iter().map(|p| p * scale).collect();
    let step = (cfg.stop - cfg.start).abs() / (cfg.points - 1) as f64;
    // Weak lines sit on the wings of strong neighbours and shift by a fraction of the
    // natural width, so a peak matches a line within the larger of two steps and γ/2.
    let tol = (2.0 * step).max(0.5 * setup.gamma);
    let peaks = local_maxima(&fluorescence)
        .into_iter()
        .filter(|&i| fluorescence[i] > 0.0)
        .map(|i| {
            let f = laser[i];
            let nearest = setup
                .model
                .table
                .entries
                .iter()
                .filter(|t| cfg.polarization.project(t) != C64::new(0.0, 0.0))
                .min_by(|a, b| (a.frequency - f).abs().total_cmp(&(b.frequency - f).abs()))
                .filter(|t| (t.frequency - f).abs() <= tol);
            PeakMatch {
                frequency_hz: to_hz(f),
                ground: nearest.map(|t| t.ground),
                excited: nearest.map(|t| t.excited),
                table_frequency_hz: nearest.map(|t| to_hz(t.frequency)),
            }
        })
        .collect();
    Ok(PleResult { laser, fluorescence, excited_population, peaks })
}

impl PleResult {
    pub fn scan(&self, setup: &NvSetup) -> ScanResult {
        ScanResult {
            axes: vec![Axis::explicit("laser", "hz", self.laser.iter().map(|w| to_hz(*w)).collect())],
            columns: vec![
                Column { name: "fluorescence".into(), values: self.fluorescence.clone(), population: false },
                Column { name: "excited_population".into(), values: self.excited_population.clone(), population: true },
            ],
            fits: json!({ "peaks": self.peaks }),
            constants_version: setup.constants_version.clone(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Optical pumping

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpTarget {
    /// σ⁻ on |+1⟩→|A₂⟩ empties |+1⟩.
    Minus,
    /// σ⁺ on |−1⟩→|A₂⟩ empties |−1⟩.
    Plus,
    /// First step only: equal mixture of |±1⟩ (the reference preparation).
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Imperfections {
    /// Off-resonant excitation of |±1⟩ by the |0⟩→|Eₓ⟩ laser.
    pub off_resonant: bool,
    /// Decay from the excited levels back to |0⟩ during the second step.
    pub decay_to_zero: bool,
    /// Residual coupling of the target state by the selective laser.
    pub imperfect_selection: bool,
}

impl Imperfections {
    pub const ALL: Self = Self { off_resonant: true, decay_to_zero: true, imperfect_selection: true };
    pub const NONE: Self = Self { off_resonant: false, decay_to_zero: false, imperfect_selection: false };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpConfig {
    pub target: PumpTarget,
    pub step1_duration: f64,
    pub step1_rabi: f64,
    pub step2_duration: f64,
    pub step2_rabi: f64,
    /// Power fraction of the polarization that would address the target state.
    pub polarization_impurity: f64,
    pub imperfections: Imperfections,
    pub attribution: bool,
}

impl Default for PumpConfig {
    fn default() -> Self {
        Self {
            target: PumpTarget::Minus,
            step1_duration: 20e-6,
            step1_rabi: crate::hz(10e6),
            step2_duration: 400e-9,
            step2_rabi: crate::hz(5e6),
            polarization_impurity: 0.0,
            imperfections: Imperfections::ALL,
            attribution: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Attribution {
    /// Target population with every imperfection off.
    pub ideal: f64,
    /// Loss of target population caused by each imperfection alone.
    pub off_resonant: f64,
    pub decay_to_zero: f64,
    pub imperfect_selection: f64,
}

#[derive(Debug, Clone)]
pub struct PumpResult {
    pub state: DensityMatrix,
    pub target_population: f64,
    pub attribution: Option<Attribution>,
}

impl PumpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("step1_duration", self.step1_duration),
            ("step1_rabi", self.step1_rabi),
            ("step2_duration", self.step2_duration),
            ("step2_rabi", self.step2_rabi),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.polarization_impurity) {
            return Err(Error::Config("polarization impurity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Low-saturation excitation rate of a transition detuned by `detuning` with coupling `g`.
fn scattering_rate(g: f64, detuning: f64, gamma: f64) -> f64 {
    4.0 * g * g * gamma / (gamma * gamma + 4.0 * detuning * detuning)
}

/// Compiled pumping steps (one for `Mixture`, two otherwise) with the given imperfections switched on.
pub fn pump_segments(setup: &NvSetup, cfg: &PumpConfig, imp: Imperfections) -> Result<Vec<CompiledSegment>> {
    use StateLabel::*;
    // Step 1: |0⟩→|Eₓ⟩.
    let pol1 = Polarization::linear_x();
    let mut seg1 = setup.segment(cfg.step1_duration)?.with_drive(DriveField::new((G0, Ex), 0.0, pol1, cfg.step1_rabi));
    let laser1 = setup.model.transition(G0, Ex).map(|t| t.frequency).unwrap_or(0.0);
    if imp.off_resonant {
        for t in &setup.model.table.entries {
            if t.ground == G0 {
                continue;
            }
            let g = cfg.step1_rabi * pol1.project(t).norm();
            let r = scattering_rate(g, t.frequency - laser1, setup.gamma);
            if r > 0.0 {
                seg1.channels.push(CollapseChannel::decay(NUM_STATES, t.ground.index(), t.excited.index(), r)?);
            }
        }
    }
    let c1 = setup.compile(&seg1)?;
    if cfg.target == PumpTarget::Mixture {
        return Ok(vec![c1]);
    }
    // Step 2: selective circular drive on the state to be emptied.
    let (source, target) = match cfg.target {
        PumpTarget::Minus => (GPlus, GMinus),
        _ => (GMinus, GPlus),
    };
    let main = setup.selective_polarization(source)?;
    let pol2 = if imp.imperfect_selection && cfg.polarization_impurity > 0.0 {
        let wrong = setup.selective_polarization(target)?;
        let (a, b) = ((1.0 - cfg.polarization_impurity).sqrt(), cfg.polarization_impurity.sqrt());
        Polarization::normalized(
            main.sigma_plus * a + wrong.sigma_plus * b,
            main.sigma_minus * a + wrong.sigma_minus * b,
            C64::new(0.0, 0.0),
        )?
    } else {
        main
    };
    let mut branching = setup.branching;
    if !imp.decay_to_zero {
        for e in StateLabel::EXCITED {
            let b = branching.get(e);
            let s = b[1] + b[2];
            if s > 0.0 {
                branching.set(e, [0.0, b[1] / s, b[2] / s]);
            }
        }
    }
    let a = setup
        .model
        .transition(source, A2)
        .map(|t| pol2.project(t).norm())
        .filter(|a| *a > 0.0)
        .ok_or_else(|| Error::Config("selective pumping polarization does not couple the source state".into()))?;
    let seg2 = PulseSegment::new(cfg.step2_duration)
        .with_channels(setup.channels_with(&branching)?)
        .with_drive(DriveField::new((source, A2), 0.0, pol2, cfg.step2_rabi / a));
    let mut c2 = setup.compile(&seg2)?;
    if !imp.imperfect_selection {
        let ti = target.index();
        for k in 0..NUM_STATES {
            if k != ti {
                c2.hamiltonian[(k, ti)] = C64::new(0.0, 0.0);
                c2.hamiltonian[(ti, k)] = C64::new(0.0, 0.0);
            }
        }
        c2.couplings.retain(|c| c.from != target);
    }
    Ok(vec![c1, c2])
}

fn pump_once(setup: &NvSetup, cfg: &PumpConfig, imp: Imperfections) -> Result<DensityMatrix> {
    let mut rho = setup.ground_mixture();
    for seg in pump_segments(setup, cfg, imp)? {
        rho = propagate(&rho, &seg.liouvillian()?, seg.duration)?;
    }
    Ok(rho)
}

fn population_of_target(rho: &DensityMatrix, target: PumpTarget) -> f64 {
    match target {
        PumpTarget::Minus => rho.population(StateLabel::GMinus.index()),
        PumpTarget::Plus => rho.population(StateLabel::GPlus.index()),
        PumpTarget::Mixture => rho.population(StateLabel::GPlus.index()) + rho.population(StateLabel::GMinus.index()),
    }
}

pub fn run_optical_pumping(setup: &NvSetup, cfg: &PumpConfig) -> Result<PumpResult> {
    setup.validate()?;
    cfg.validate()?;
    let state = pump_once(setup, cfg, cfg.imperfections)?;
    state.check()?;
    let target_population = population_of_target(&state, cfg.target);
    let attribution = if cfg.attribution && cfg.target != PumpTarget::Mixture {
        let run = |imp: Imperfections| -> Result<f64> { Ok(population_of_target(&pump_once(setup, cfg, imp)?, cfg.target)) };
        let ideal = run(Imperfections::NONE)?;
        Some(Attribution {
            ideal,
            off_resonant: ideal - run(Imperfections { off_resonant: true, ..Imperfections::NONE })?,
            decay_to_zero: ideal - run(Imperfections { decay_to_zero: true, ..Imperfections::NONE })?,
            imperfect_selection: ideal - run(Imperfections { imperfect_selection: true, ..Imperfections::NONE })?,
        })
    } else {
        None
    };
    Ok(PumpResult { state, target_population, attribution })
}

impl PumpResult {
    pub fn scan(&self, setup: &NvSetup) -> ScanResult {
        let labels: Vec<String> = StateLabel::ALL.iter().map(|s| s.to_string()).collect();
        ScanResult {
            axes: vec![Axis::explicit("state", "", (0..NUM_STATES).map(|k| k as f64).collect())],
            columns: vec![Column { name: "population".into(), values: self.state.populations(), population: true }],
            fits: json!({
                "labels": labels,
                "target_population": self.target_population,
                "attribution": self.attribution,
            }),
            constants_version: setup.constants_version.clone(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Microwave Rabi with two readout schemes

#[derive(Debug, Clone, PartialEq)]
pub struct MwRabiConfig {
    pub mw_rabi: f64,
    pub mw_detuning: f64,
    pub duration: f64,
    pub points: usize,
    /// Coupling on |+1⟩→|A₂⟩ during the selective π-pulse readout.
    pub pi_readout_coupling: f64,
    /// Drive and duration of the conventional |0⟩→|Eₓ⟩ readout.
    pub conventional_rabi: f64,
    pub conventional_duration: f64,
    pub initial: [f64; 3],
}

impl Default for MwRabiConfig {
    fn default() -> Self {
        Self {
            mw_rabi: crate::hz(5e6),
            mw_detuning: 0.0,
            duration: 400e-9,
            points: 81,
            pi_readout_coupling: crate::hz(100e6),
            conventional_rabi: crate::hz(10e6),
            conventional_duration: 100e-9,
            initial: [1.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MwRabiResult {
    pub times: Vec<f64>,
    pub zero_readout: Vec<f64>,
    pub plus_readout: Vec<f64>,
    pub population_zero: Vec<f64>,
    pub population_plus: Vec<f64>,
    /// (max − min)/(max + min) of each photon trace.
    pub zero_contrast: f64,
    pub plus_contrast: f64,
    /// Pearson correlation of the two photon traces (−1 for perfectly out of phase).
    pub correlation: f64,
}

fn contrast(y: &[f64]) -> f64 {
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    if max + min > 0.0 {
        (max - min) / (max + min)
    } else {
        0.0
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

impl MwRabiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 2 || !(self.duration > 0.0) {
            return Err(Error::Config("microwave Rabi scan needs a positive duration and at least 2 points".into()));
        }
        if !(self.mw_rabi.is_finite() && self.mw_rabi >= 0.0 && self.mw_detuning.is_finite()) {
            return Err(Error::Config("microwave amplitude must be non-negative and detuning finite".into()));
        }
        if !(self.pi_readout_coupling > 0.0 && self.conventional_rabi > 0.0 && self.conventional_duration > 0.0) {
            return Err(Error::Config("readout couplings and durations must be positive".into()));
        }
        check_ground_populations(&self.initial)
    }
}

pub fn run_mw_rabi(setup: &NvSetup, cfg: &MwRabiConfig) -> Result<MwRabiResult> {
    use StateLabel::*;
    setup.validate()?;
    cfg.validate()?;
    let times = Axis::linspace("time", "s", 0.0, cfg.duration, cfg.points)?.values;
    let mut p = [0.0; NUM_STATES];
    p[..3].copy_from_slice(&cfg.initial);
    let rho0 = DensityMatrix::diagonal(&p)?;
    let mw = setup.segment(cfg.duration)?.with_microwave(MicrowaveDrive {
        pair: (G0, GPlus),
        rabi: cfg.mw_rabi,
        detuning: cfg.mw_detuning,
    });
    let l = setup.compile(&mw)?.liouvillian()?;
    let dt = times[1] - times[0];
    let u = propagator(&l, dt);
    let plus_ro =
        pi_pulse_readout(setup, GPlus, A2, setup.selective_polarization(GPlus)?, cfg.pi_readout_coupling, 10.0 / setup.gamma)?;
    let zero_ro = pulse_readout(setup, G0, Ex, Polarization::linear_x(), cfg.conventional_rabi, cfg.conventional_duration)?;
    let mut rho = rho0.to_vector();
    let (mut zr, mut pr, mut p0, mut pp) = (vec![], vec![], vec![], vec![]);
    for k in 0..times.len() {
        if k > 0 {
            rho = &u * &rho;
        }
        let s = DensityMatrix::from_vector(&rho)?.renormalized()?;
        s.check()?;
        rho = s.to_vector();
        zr.push(zero_ro.photons(&s));
        pr.push(plus_ro.photons(&s));
        p0.push(s.population(G0.index()));
        pp.push(s.population(GPlus.index()));
    }
    Ok(MwRabiResult {
        zero_contrast: contrast(&zr),
        plus_contrast: contrast(&pr),
        correlation: pearson(&zr, &pr),
        times,
        zero_readout: zr,
        plus_readout: pr,
        population_zero: p0,
        population_plus: pp,
    })
}

impl MwRabiResult {
    pub fn scan(&self, setup: &NvSetup) -> ScanResult {
        ScanResult {
            axes: vec![Axis::explicit("time", "s", self.times.clone())],
            columns: vec![
                Column { name: "photons_zero_readout".into(), values: self.zero_readout.clone(), population: false },
                Column { name: "photons_plus_readout".into(), values: self.plus_readout.clone(), population: false },
                Column { name: "population_0".into(), values: self.population_zero.clone(), population: true },
                Column { name: "population_plus1".into(), values: self.population_plus.clone(), population: true },
            ],
            fits: json!({
                "zero_contrast": self.zero_contrast,
                "plus_contrast": self.plus_contrast,
                "correlation": self.correlation,
            }),
            constants_version: setup.constants_version.clone(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Two-photon Rabi oscillations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterSampling {
    /// One uniform draw inside each of N equal-probability strata, mapped through the
    /// normal quantile function.
    #[default]
    Stratified,
    /// Independent standard-normal draws.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhotonConfig {
    /// Laser powers (W).
    pub powers: Vec<f64>,
    /// Calibration point: coupling |Ω±| reached at `reference_power`.
    pub reference_power: f64,
    pub reference_coupling: f64,
    /// Carrier detuning from |±1⟩→|A₂⟩.
    pub detuning: f64,
    pub polarization: Polarization,
    /// Gaussian detuning jitter σ.
    pub jitter: f64,
    pub samples: usize,
    pub sampling: JitterSampling,
    pub seed: u64,
    pub time_points: usize,
    /// Window length in population-oscillation periods π/|Ω′|.
    pub window_periods: f64,
    pub pump: PumpConfig,
    pub readout_coupling: f64,
    /// Extra time at which the long-time normalized signal is evaluated, in units of 1/Γ.
    pub long_time_decays: f64,
}

impl Default for TwoPhotonConfig {
    fn default() -> Self {
        Self {
            powers: vec![10e-6, 20e-6, 30e-6, 46e-6],
            reference_power: 46e-6,
            reference_coupling: crate::hz(150e6),
            detuning: crate::hz(-2.24e9),
            polarization: Polarization::linear_x(),
            jitter: crate::hz(490e6),
            samples: 200,
            sampling: JitterSampling::Stratified,
            seed: 1,
            time_points: 121,
            window_periods: 4.0,
            pump: PumpConfig { attribution: false, ..PumpConfig::default() },
            readout_coupling: crate::hz(100e6),
            long_time_decays: 4.0,
        }
    }
}

impl TwoPhotonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.powers.is_empty() || self.powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Config("powers must be a non-empty list of positive values".into()));
        }
        if !(self.reference_power > 0.0 && self.reference_coupling > 0.0) {
            return Err(Error::Config("power calibration must be positive".into()));
        }
        if self.detuning == 0.0 || !self.detuning.is_finite() {
            return Err(Error::Config("two-photon detuning must be nonzero".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        if self.samples == 0 || self.time_points < 8 {
            return Err(Error::Config("need at least 1 jitter sample and 8 time points".into()));
        }
        if !(self.window_periods > 0.0 && self.long_time_decays > 0.0) {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        self.pump.validate()
    }

    /// `Ω±(P) = k √P`.
    pub fn coupling(&self, power: f64) -> f64 {
        self.reference_coupling * (power / self.reference_power).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoPhotonPoint {
    pub power: f64,
    pub coupling_plus: f64,
    pub coupling_minus: f64,
    pub delta2: f64,
    pub delta1: f64,
    pub times: Vec<f64>,
    pub normalized: Vec<f64>,
    pub plus_population: Vec<f64>,
    pub fit: Option<DampedCosineFit>,
    pub fit_ok: bool,
    /// Ω′ and Γ from the exponential fit: half the oscillation frequency and half the
    /// envelope rate (the population oscillates at 2Ω′).
    pub rabi_fit: f64,
    pub decay_fit: f64,
    /// Same trace fitted with a Gaussian envelope `e^{−(s t)²/2}`; Γ = s/2 is the spread
    /// of Ω′ across the jitter ensemble.
    pub gaussian_fit: Option<DampedCosineFit>,
    pub decay_fit_gaussian: f64,
    pub rabi_analytic: f64,
    pub decay_analytic: f64,
    pub adiabaticity: f64,
    pub long_time_normalized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoPhotonResult {
    pub points: Vec<TwoPhotonPoint>,
    pub rabi_line: Option<OriginLine>,
    pub decay_line: Option<OriginLine>,
    pub decay_line_gaussian: Option<OriginLine>,
    pub reference_photons: f64,
    pub seed: u64,
}

/// Standard-normal draw for sample `sample` of `samples`. Each sample owns a ChaCha
/// stream, so the value depends only on (seed, index) and is shared by every power.
pub fn jitter_draw(seed: u64, sample: usize, samples: usize, sampling: JitterSampling) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    match sampling {
        JitterSampling::Independent => StandardNormal.sample(&mut rng),
        JitterSampling::Stratified => {
            let u: f64 = rng.random();
            let p = (sample as f64 + u) / samples as f64;
            Normal::standard().inverse_cdf(p.clamp(1e-300, 1.0 - f64::EPSILON))
        }
    }
}

struct DriveSetup {
    compiled: CompiledSegment,
    plus: f64,
    minus: f64,
    delta2: f64,
    delta1: f64,
}

fn two_photon_drive(setup: &NvSetup, cfg: &TwoPhotonConfig, power: f64, shift: f64, duration: f64) -> Result<DriveSetup> {
    use StateLabel::*;
    let a = setup
        .model
        .transition(GPlus, A2)
        .map(|t| cfg.polarization.project(t).norm())
        .filter(|a| *a > 0.0)
        .ok_or_else(|| Error::Config("drive polarization does not couple |+1⟩→|A₂⟩".into()))?;
    let seg = setup
        .segment(duration)?
        .with_drive(DriveField::new((GPlus, A2), cfg.detuning + shift, cfg.polarization, cfg.coupling(power) / a));
    let compiled = setup.compile(&seg)?;
    let find = |g, e| compiled.couplings.iter().find(|c| c.from == g && c.to == e);
    let cp = find(GPlus, A2).ok_or_else(|| Error::Compile("two-photon drive lost |+1⟩→|A₂⟩".into()))?;
    let cm = find(GMinus, A2).ok_or_else(|| Error::Compile("two-photon drive does not reach |−1⟩→|A₂⟩".into()))?;
    let d2 = cp.detuning;
    let d1 = find(GPlus, A1).map(|c| c.detuning).unwrap_or_else(|| {
        let f1 = setup.model.transition(GPlus, A1).map(|t| t.frequency).unwrap_or(f64::INFINITY);
        f1 - cp.tone_frequency
    });
    let (plus, minus) = (cp.amplitude.norm(), cm.amplitude.norm());
    Ok(DriveSetup { compiled, plus, minus, delta2: d2, delta1: d1 })
}

/// Nominal (jitter-free) drive segment of the two-photon recipe at `power`.
pub fn two_photon_segment(setup: &NvSetup, cfg: &TwoPhotonConfig, power: f64, duration: f64) -> Result<CompiledSegment> {
    Ok(two_photon_drive(setup, cfg, power, 0.0, duration)?.compiled)
}

pub fn run_two_photon_rabi(setup: &NvSetup, cfg: &TwoPhotonConfig) -> Result<TwoPhotonResult> {
    use StateLabel::*;
    setup.validate()?;
    cfg.validate()?;
    let prepared = run_optical_pumping(setup, &PumpConfig { attribution: false, ..cfg.pump.clone() })?.state;
    let reference_state =
        run_optical_pumping(setup, &PumpConfig { target: PumpTarget::Mixture, attribution: false, ..cfg.pump.clone() })?
            .state;
    let readout =
        pi_pulse_readout(setup, GPlus, A2, setup.selective_polarization(GPlus)?, cfg.readout_coupling, 10.0 / setup.gamma)?;
    let reference_photons = readout.photons(&reference_state);
    if !(reference_photons > 0.0) {
        return Err(Error::Numerical { message: "reference readout collected no photons".into(), residual: reference_photons });
    }
    let draws: Vec<f64> =
        (0..cfg.samples).map(|k| cfg.jitter * jitter_draw(cfg.seed, k, cfg.samples, cfg.sampling)).collect();

    let mut points = Vec::with_capacity(cfg.powers.len());
    for &power in &cfg.powers {
        let nominal = two_photon_drive(setup, cfg, power, 0.0, 1.0)?;
        let a1_offset = nominal.delta1 - nominal.delta2;
        let params = TwoPhotonParams::new(
            C64::new(nominal.plus, 0.0),
            C64::new(nominal.minus, 0.0),
            nominal.delta2,
            a1_offset,
            setup.gamma,
            cfg.jitter,
        );
        let rabi_analytic = analytics::two_photon_rabi(&params)?.norm();
        let decay_analytic = analytics::two_photon_decay(&params)?;
        let adiabaticity = analytics::adiabaticity_check(&params)?;
        let window = cfg.window_periods * std::f64::consts::PI / rabi_analytic;
        let long_time = window + cfg.long_time_decays / decay_analytic.max(rabi_analytic * 1e-3);
        let times = Axis::linspace("time", "s", 0.0, window, cfg.time_points)?.values;
        let dt = times[1] - times[0];

        let per_sample: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = draws
            .par_iter()
            .map(|&shift| {
                let d = two_photon_drive(setup, cfg, power, shift, window)?;
                let l = d.compiled.liouvillian()?;
                let u = propagator(&l, dt);
                let mut v = prepared.to_vector();
                let mut photons = Vec::with_capacity(times.len());
                let mut pops = Vec::with_capacity(times.len());
                for k in 0..times.len() {
                    if k > 0 {
                        v = &u * &v;
                    }
                    let s = DensityMatrix::from_vector(&v)?.renormalized()?;
                    s.check()?;
                    v = s.to_vector();
                    photons.push(readout.photons(&s));
                    pops.push(s.population(GPlus.index()));
                }
                let late = propagate(&prepared, &l, long_time)?;
                late.check()?;
                Ok((photons, pops, readout.photons(&late)))
            })
            .collect();
        let mut normalized = vec![0.0; times.len()];
        let mut plus_population = vec![0.0; times.len()];
        let mut late = 0.0;
        for r in per_sample {
            let (ph, pp, lt) = r?;
            for k in 0..times.len() {
                normalized[k] += ph[k];
                plus_population[k] += pp[k];
            }
            late += lt;
        }
        let n = cfg.samples as f64;
        for k in 0..times.len() {
            normalized[k] /= n * reference_photons;
            plus_population[k] /= n;
        }
        let long_time_normalized = late / (n * reference_photons);
        let fit = fit_damped_cosine_shaped(&times, &normalized, DecayShape::Exponential).ok();
        let gaussian_fit = fit_damped_cosine_shaped(&times, &normalized, DecayShape::Gaussian).ok();
        let decay_fit_gaussian = gaussian_fit.map(|f| 0.5 * f.model.decay).unwrap_or(f64::NAN);
        let fit_ok = fit.map(|f| f.converged && f.model.frequency > 0.0).unwrap_or(false);
        let (rabi_fit, decay_fit) = fit.map(|f| (0.5 * f.model.frequency, 0.5 * f.model.decay)).unwrap_or((f64::NAN, f64::NAN));
        if !fit_ok {
            log::warn!("two-photon fit at {power:e} W did not converge; point flagged");
        }
        points.push(TwoPhotonPoint {
            power,
            coupling_plus: nominal.plus,
            coupling_minus: nominal.minus,
            delta2: nominal.delta2,
            delta1: nominal.delta1,
            times,
            normalized,
            plus_population,
            fit,
            fit_ok,
            rabi_fit,
            decay_fit,
            gaussian_fit,
            decay_fit_gaussian,
            rabi_analytic,
            decay_analytic,
            adiabaticity,
            long_time_normalized,
        });
    }
    let good: Vec<&TwoPhotonPoint> = points.iter().filter(|p| p.fit_ok).collect();
    let xs: Vec<f64> = good.iter().map(|p| p.power).collect();
    let rabi_line = fit_line_through_origin(&xs, &good.iter().map(|p| p.rabi_fit).collect::<Vec<_>>()).ok();
    let decay_line = fit_line_through_origin(&xs, &good.iter().map(|p| p.decay_fit).collect::<Vec<_>>()).ok();
    let gauss: Vec<&TwoPhotonPoint> = good.iter().copied().filter(|p| p.decay_fit_gaussian.is_finite()).collect();
    let decay_line_gaussian = fit_line_through_origin(
        &gauss.iter().map(|p| p.power).collect::<Vec<_>>(),
        &gauss.iter().map(|p| p.decay_fit_gaussian).collect::<Vec<_>>(),
    )
    .ok();
    Ok(TwoPhotonResult { points, rabi_line, decay_line, decay_line_gaussian, reference_photons, seed: cfg.seed })
}

impl TwoPhotonResult {
    pub fn scan(&self, setup: &NvSetup) -> ScanResult {
        let m = self.points.first().map(|p| p.times.len()).unwrap_or(0);
        let mut time = Vec::new();
        let mut norm = Vec::new();
        let mut pop = Vec::new();
        for p in &self.points {
            time.extend(&p.times);
            norm.extend(&p.normalized);
            pop.extend(&p.plus_population);
        }
        let summary: Vec<serde_json::Value> = self
            .points
            .iter()
            .map(|p| {
                json!({
                    "power_w": p.power,
                    "coupling_plus_hz": to_hz(p.coupling_plus),
                    "coupling_minus_hz": to_hz(p.coupling_minus),
                    "delta2_hz": to_hz(p.delta2),
                    "delta1_hz": to_hz(p.delta1),
                    "fit_ok": p.fit_ok,
                    "rabi_fit_hz": to_hz(p.rabi_fit),
                    "decay_fit_per_s": p.decay_fit,
                    "decay_fit_gaussian_per_s": p.decay_fit_gaussian,
                    "rabi_analytic_hz": to_hz(p.rabi_analytic),
                    "decay_analytic_per_s": p.decay_analytic,
                    "adiabaticity": p.adiabaticity,
                    "long_time_normalized": p.long_time_normalized,
                    "fit": p.fit,
                })
            })
            .collect();
        ScanResult {
            axes: vec![
                Axis::explicit("power", "w", self.points.iter().map(|p| p.power).collect()),
                Axis::explicit("time_index", "", (0..m).map(|k| k as f64).collect()),
            ],
            columns: vec![
                Column { name: "time_s".into(), values: time, population: false },
                Column { name: "normalized_signal".into(), values: norm, population: false },
                Column { name: "population_plus1".into(), values: pop, population: true },
            ],
            fits: json!({
                "points": summary,
                "rabi_vs_power": self.rabi_line,
                "decay_vs_power": self.decay_line,
                "decay_gaussian_vs_power": self.decay_line_gaussian,
                "reference_photons": self.reference_photons,
            }),
            constants_version: setup.constants_version.clone(),
            seed: self.seed,
        }
    }
}

/// Four-level far-detuned Λ system `{|+1⟩, |−1⟩, |A₂⟩, |A₁⟩}` in the rotating frame,
/// with |A₁⟩ coupled at the opposite relative phase. Returns the |−1⟩ population trace
/// starting from |+1⟩ and the sample times.
pub fn four_level_two_photon(
    p: &TwoPhotonParams,
    include_a1: bool,
    duration: f64,
    points: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut h = CMatrix::zeros(4, 4);
    h[(2, 2)] = C64::new(p.delta2, 0.0);
    h[(3, 3)] = C64::new(p.delta1(), 0.0);
    let set = |h: &mut CMatrix, e: usize, g: usize, om: C64| {
        h[(e, g)] = -om;
        h[(g, e)] = -om.conj();
    };
    set(&mut h, 2, 0, p.omega_plus);
    set(&mut h, 2, 1, p.omega_minus);
    if include_a1 {
        set(&mut h, 3, 0, p.omega_plus);
        set(&mut h, 3, 1, -p.omega_minus);
    }
    let mut ch = Vec::new();
    for e in [2, 3] {
        for g in [0, 1] {
            ch.push(CollapseChannel::decay(4, e, g, 0.5 * p.gamma)?);
        }
    }
    let l = liouvillian(&h, &ch)?;
    let traj = crate::dynamics::evolve_exact(&DensityMatrix::basis(4, 0), &l, duration, points)?;
    traj.check()?;
    Ok((traj.times.clone(), traj.population(1)))
}

// ---------------------------------------------------------------------------
// Double-dark resonance map

#[derive(Debug, Clone, PartialEq)]
pub enum DarkmapMode {
    Steady,
    /// Excited population averaged over a pulse of this length, starting from the
    /// ground mixture (fluorescence collected during the pulse).
    Pulse(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarkmapConfig {
    pub zfs: f64,
    pub zeeman: f64,
    pub delta: Axis,
    pub modulation: Axis,
    pub omega0: C64,
    pub omega_plus: C64,
    pub omega_minus: C64,
    pub gamma: f64,
    pub branching: [f64; 3],
    pub mode: DarkmapMode,
}

impl DarkmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.values.len() < 2 || self.modulation.values.len() < 2 {
            return Err(Error::Config("dark-resonance map axes need at least 2 points".into()));
        }
        if !(self.zeeman >= 0.0) {
            return Err(Error::Config("Zeeman splitting must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("decay rate must be positive".into()));
        }
        if self.branching.iter().any(|b| *b < 0.0) || (self.branching.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("|A₂⟩ branching must be non-negative and sum to 1".into()));
        }
        if let DarkmapMode::Pulse(t) = self.mode {
            if !(t > 0.0) {
                return Err(Error::Config("pulse length must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn params(&self, delta: f64, modulation: f64) -> TripodParams {
        TripodParams {
            delta,
            zfs: self.zfs,
            modulation,
            zeeman: self.zeeman,
            omega0: self.omega0,
            omega_plus: self.omega_plus,
            omega_minus: self.omega_minus,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DarkLine {
    /// Mean modulation frequency of the locus (rad/s).
    pub position: f64,
    /// Least-squares slope dω_mod/dΔ.
    pub slope: f64,
    /// Largest deviation of a member from `position`.
    pub spread: f64,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct DarkmapResult {
    pub config: DarkmapConfig,
    /// Row-major `[Δ][ω_mod]`.
    pub excited: Vec<f64>,
    /// Minima positions per Δ row.
    pub minima: Vec<Vec<f64>>,
    pub lines: Vec<DarkLine>,
    pub degenerate_points: usize,
}

pub fn run_dark_resonance_map(cfg: &DarkmapConfig) -> Result<DarkmapResult> {
    cfg.validate()?;
    let nd = cfg.delta.values.len();
    let nm = cfg.modulation.values.len();
    let mut mixed = [0.0; 4];
    mixed[..3].fill(1.0 / 3.0);
    let rho0 = DensityMatrix::diagonal(&mixed)?;
    let cells: Vec<Result<(f64, bool)>> = (0..nd * nm)
        .into_par_iter()
        .map(|idx| {
            let p = cfg.params(cfg.delta.values[idx / nm], cfg.modulation.values[idx % nm]);
            let l = tripod_liouvillian(&p, cfg.gamma, cfg.branching)?;
            match cfg.mode {
                DarkmapMode::Steady => {
                    let ss = steady_state(&l)?;
                    ss.rho.check()?;
                    Ok((ss.rho.population(TRIPOD_EXCITED), ss.degenerate))
                }
                DarkmapMode::Pulse(t) => {
                    let s = propagate(&rho0, &l, t)?;
                    s.check()?;
                    Ok((integrated_occupation(&l, &rho0, &[TRIPOD_EXCITED], t)? / t, false))
                }
            }
        })
        .collect();
    let mut excited = Vec::with_capacity(nd * nm);
    let mut degenerate_points = 0;
    for c in cells {
        let (v, d) = c?;
        excited.push(v);
        degenerate_points += d as usize;
    }
    if degenerate_points > 0 {
        log::warn!("{degenerate_points} map points have a degenerate steady state; the pulse mode is better defined there");
    }
    let minima: Vec<Vec<f64>> = (0..nd)
        .map(|i| local_minima(&excited[i * nm..(i + 1) * nm]).into_iter().map(|j| cfg.modulation.values[j]).collect())
        .collect();
    let step = (cfg.modulation.values[nm - 1] - cfg.modulation.values[0]).abs() / (nm - 1) as f64;
    let lines = group_loci(&cfg.delta.values, &minima, 2.0 * step);
    Ok(DarkmapResult { config: cfg.clone(), excited, minima, lines, degenerate_points })
}

/// Chains per-row minima into loci: a minimum joins the locus whose latest member is
/// within `tol`, otherwise it starts a new one.
fn group_loci(delta: &[f64], minima: &[Vec<f64>], tol: f64) -> Vec<DarkLine> {
    let mut loci: Vec<Vec<(f64, f64)>> = Vec::new();
    for (d, row) in delta.iter().zip(minima) {
        for &m in row {
            match loci.iter_mut().find(|l| (l.last().unwrap().1 - m).abs() <= tol && l.last().unwrap().0 != *d) {
                Some(l) => l.push((*d, m)),
                None => loci.push(vec![(*d, m)]),
            }
        }
    }
    let mut lines: Vec<DarkLine> = loci
        .into_iter()
        .map(|pts| {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            let spread = pts.iter().map(|p| (p.1 - my).abs()).fold(0.0, f64::max);
            DarkLine { position: my, slope, spread, rows: pts.len() }
        })
        .collect();
    lines.sort_by(|a, b| a.position.total_cmp(&b.position));
    lines
}

impl DarkmapResult {
    pub fn scan(&self, constants_version: &str) -> ScanResult {
        let lines: Vec<serde_json::Value> = self
            .lines
            .iter()
            .map(|l| json!({"position_hz": to_hz(l.position), "slope": l.slope, "spread_hz": to_hz(l.spread), "rows": l.rows}))
            .collect();
        let expected = analytics::dark_line_positions(self.config.zfs, self.config.zeeman).ok().map(|p| [to_hz(p[0]), to_hz(p[1])]);
        ScanResult {
            axes: vec![
                Axis::explicit("delta", "hz", self.config.delta.values.iter().map(|v| to_hz(*v)).collect()),
                Axis::explicit("modulation", "hz", self.config.modulation.values.iter().map(|v| to_hz(*v)).collect()),
            ],
            columns: vec![Column { name: "excited_population".into(), values: self.excited.clone(), population: true }],
            fits: json!({
                "dark_lines": lines,
                "expected_positions_hz": expected,
                "degenerate_points": self.degenerate_points,
            }),
            constants_version: constants_version.into(),
            seed: 0,
        }
    }
}

/// Dark state vector of the tripod as a 4-level density matrix.
pub fn dark_state_density(v: &Vector4<C64>) -> Result<DensityMatrix> {
    DensityMatrix::pure(&crate::fields::tripod_vector(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hz;

    fn setup() -> NvSetup {
        NvSetup::calibrated(&Constants::default(), 0.0).unwrap()
    }

    #[test]
    fn local_extrema() {
        assert_eq!(local_maxima(&[0.0, 1.0, 0.0, 2.0, 2.0, 1.0, 3.0]), vec![1, 3]);
        assert_eq!(local_minima(&[3.0, 1.0, 2.0, 0.0, 5.0]), vec![1, 3]);
    }

    #[test]
    fn jitter_draws_are_reproducible() {
        for m in [JitterSampling::Stratified, JitterSampling::Independent] {
            assert_eq!(jitter_draw(7, 3, 10, m), jitter_draw(7, 3, 10, m));
            assert_ne!(jitter_draw(7, 3, 10, m), jitter_draw(7, 4, 10, m));
            assert_ne!(jitter_draw(7, 3, 10, m), jitter_draw(8, 3, 10, m));
        }
        // One draw per stratum: sorted draws fall in successive quantile bins.
        let n = 50;
        let normal = Normal::standard();
        for k in 0..n {
            let p = normal.cdf(jitter_draw(1, k, n, JitterSampling::Stratified));
            assert!(p >= k as f64 / n as f64 - 1e-12 && p <= (k + 1) as f64 / n as f64 + 1e-12);
        }
    }

    #[test]
    fn zero_laser_gives_flat_zero_ple() {
        let s = setup();
        let cfg = PleConfig {
            start: hz(-1e9),
            stop: hz(1e9),
            points: 11,
            rabi: 0.0,
            polarization: Polarization::linear(std::f64::consts::FRAC_PI_4),
            mixing_rate: 1e6,
            mode: PleMode::Steady,
        };
        let r = run_ple_scan(&s, &cfg).unwrap();
        assert!(r.fluorescence.iter().all(|f| f.abs() < 1e-12));
        assert!(r.peaks.is_empty());
    }

    #[test]
    fn pi_readout_of_zero_is_dark_and_selective() {
        let s = setup();
        let c = hz(100e6);
        let zero = DensityMatrix::basis(NUM_STATES, StateLabel::G0.index());
        let plus = DensityMatrix::basis(NUM_STATES, StateLabel::GPlus.index());
        let minus = DensityMatrix::basis(NUM_STATES, StateLabel::GMinus.index());
        let pol = Polarization::sigma_minus();
        let p0 = run_pi_pulse_readout(&s, &zero, pol, c).unwrap();
        let pp = run_pi_pulse_readout(&s, &plus, pol, c).unwrap();
        let pm = run_pi_pulse_readout(&s, &minus, pol, c).unwrap();
        assert!(p0 < 1e-3 * pp, "{p0} vs {pp}");
        assert!(pp > 10.0 * pm, "{pp} vs {pm}");
        assert!(pp > 0.5 && pp <= 1.0 + 1e-9);
    }

    #[test]
    fn readout_is_linear_in_initial_populations() {
        let s = setup();
        let r = pi_pulse_readout(&s, StateLabel::GPlus, StateLabel::A2, Polarization::sigma_minus(), hz(80e6), 1e-7).unwrap();
        let basis: Vec<f64> = (0..3).map(|k| r.photons(&DensityMatrix::basis(NUM_STATES, k))).collect();
        let w = [0.2, 0.5, 0.3];
        let mut p = [0.0; NUM_STATES];
        p[..3].copy_from_slice(&w);
        let mix = r.photons(&DensityMatrix::diagonal(&p).unwrap());
        let lin: f64 = w.iter().zip(&basis).map(|(a, b)| a * b).sum();
        assert!((mix - lin).abs() < 1e-12);
    }

    #[test]
    fn ideal_pumping_approaches_unity() {
        let mut s = setup();
        s.branching.ex = [0.9, 0.05, 0.05];
        s.branching.a2 = [0.0, 0.5, 0.5];
        s.branching.a1 = [0.0, 0.5, 0.5];
        let cfg = PumpConfig {
            step1_duration: 60e-6,
            step2_duration: 4e-6,
            imperfections: Imperfections::NONE,
            attribution: false,
            ..PumpConfig::default()
        };
        let r = run_optical_pumping(&s, &cfg).unwrap();
        assert!(r.target_population > 0.999, "{}", r.target_population);
    }

    #[test]
    fn far_detuned_sideband_leaves_single_carrier_resonance() {
        let zfs = hz(2.88e9);
        let om = C64::new(hz(5e6), 0.0);
        let cfg = DarkmapConfig {
            zfs,
            zeeman: hz(18e6),
            delta: Axis::linspace("delta", "", hz(-60e6), hz(60e6), 121).unwrap(),
            modulation: Axis::explicit("modulation", "", vec![zfs + hz(2e9), zfs + hz(2.001e9)]),
            omega0: om,
            omega_plus: om,
            omega_minus: om,
            gamma: 1.0 / 12e-9,
            branching: [0.02, 0.49, 0.49],
            mode: DarkmapMode::Pulse(60e-9),
        };
        let r = run_dark_resonance_map(&cfg).unwrap();
        let col: Vec<f64> = (0..121).map(|i| r.excited[i * 2]).collect();
        let top = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(top, 60);
        for k in 0..60 {
            assert!((col[k] - col[120 - k]).abs() < 1e-2 * col[60]);
        }
        assert!(col[0] < 0.25 * col[60]);
    }

    #[test]
    fn split_ground_gives_two_vertical_dark_lines() {
        let zfs = hz(2.88e9);
        let om = C64::new(hz(5e6), 0.0);
        let cfg = DarkmapConfig {
            zfs,
            zeeman: hz(18e6),
            delta: Axis::linspace("delta", "", hz(-30e6), hz(30e6), 7).unwrap(),
            modulation: Axis::linspace("modulation", "", zfs - hz(45e6), zfs + hz(45e6), 61).unwrap(),
            omega0: om,
            omega_plus: om,
            omega_minus: om,
            gamma: 1.0 / 12e-9,
            branching: [0.02, 0.49, 0.49],
            mode: DarkmapMode::Steady,
        };
        let r = run_dark_resonance_map(&cfg).unwrap();
        assert_eq!(r.lines.len(), 2, "{:?}", r.lines);
        for (l, want) in r.lines.iter().zip([zfs - hz(9e6), zfs + hz(9e6)]) {
            assert!((l.position - want).abs() < hz(1e3));
            assert_eq!(l.slope, 0.0);
            assert_eq!(l.rows, 7);
        }
    }

    #[test]
    fn pumping_is_symmetric_and_reference_is_balanced() {
        let s = setup();
        let run = |target| run_optical_pumping(&s, &PumpConfig { target, attribution: false, ..PumpConfig::default() }).unwrap();
        let (m, p) = (run(PumpTarget::Minus), run(PumpTarget::Plus));
        assert!((m.target_population - p.target_population).abs() < 1e-9);
        let r = run(PumpTarget::Mixture).state;
        assert!((r.population(1) - r.population(2)).abs() < 1e-3);
    }

    #[test]
    fn selective_polarization_nulls_the_other_branch() {
        let s = setup();
        let pol = s.selective_polarization(StateLabel::GPlus).unwrap();
        let t = |g| s.model.transition(g, StateLabel::A2).unwrap();
        assert!(pol.project(t(StateLabel::GMinus)).norm() < 1e-12);
        let a = pol.project(t(StateLabel::GPlus));
        assert!(a.re > 0.5 && a.im.abs() < 1e-12);
        assert!(s.selective_polarization(StateLabel::G0).is_err());
    }

    #[test]
    fn degenerate_ground_pulse_map_has_one_dark_line() {
        let zfs = hz(2.88e9);
        let om = C64::new(hz(5e6), 0.0);
        let cfg = DarkmapConfig {
            zfs,
            zeeman: 0.0,
            delta: Axis::linspace("delta", "", hz(-20e6), hz(20e6), 5).unwrap(),
            modulation: Axis::linspace("modulation", "", zfs - hz(45e6), zfs + hz(45e6), 61).unwrap(),
            omega0: om,
            omega_plus: om,
            omega_minus: om,
            gamma: 1.0 / 12e-9,
            branching: [0.02, 0.49, 0.49],
            mode: DarkmapMode::Pulse(1e-6),
        };
        let r = run_dark_resonance_map(&cfg).unwrap();
        assert_eq!(r.lines.len(), 1, "{:?}", r.lines);
        assert!((r.lines[0].position - zfs).abs() < hz(1e3));
    }

    #[test]
    fn ple_without_microwave_from_zero_shows_only_zero_lines() {
        let s = setup();
        let cfg = PleConfig {
            start: hz(-2.55e9),
            stop: hz(-2.2e9),
            points: 176,
            mixing_rate: 0.0,
            mode: PleMode::Pulsed { dwell: 1e-6, initial: [1.0, 0.0, 0.0] },
            ..PleConfig::default()
        };
        let r = run_ple_scan(&s, &cfg).unwrap();
        let grounds: Vec<_> = r.peaks.iter().map(|p| p.ground).collect();
        // |+1⟩→|Eₓ⟩ at −2.48 GHz is in the window but carries no population.
        assert_eq!(grounds, vec![Some(StateLabel::G0)], "{:?}", r.peaks);
    }

    #[test]
    fn scan_result_csv_shape() {
        let r = ScanResult {
            axes: vec![Axis::explicit("a", "hz", vec![1.0, 2.0]), Axis::explicit("b", "", vec![3.0, 4.0, 5.0])],
            columns: vec![Column { name: "p".into(), values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], population: true }],
            fits: json!({}),
            constants_version: "x".into(),
            seed: 0,
        };
        r.validate().unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "a_hz,b,p");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[4], "2e0,3e0,3e-1");
    }
}
