//! Command-line front end.
//!
//! Each experiment subcommand reads a JSON config (frequencies in plain Hz, times in
//! seconds), converts it once into the library's angular units, validates it, runs
//! the recipe and writes `result.csv`, `fits.json`, `meta.json` and `config.json` to
//! the output directory. Failures leave only `error.json` behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constants::Constants;
use crate::dynamics::{evolve, DensityMatrix, EvolveOptions};
use crate::experiments::{
    self, Axis, DarkmapConfig, DarkmapMode, Imperfections, JitterSampling, MwRabiConfig, NvSetup, PleConfig, PleMode,
    PumpConfig, PumpTarget, ScanResult, TwoPhotonConfig,
};
use crate::fields::{
    compile_probe, compile_sequence, Branching, CompileOptions, CompiledSegment, DriveField, MicrowaveDrive,
    Polarization, PulseSegment, Sideband, DEFAULT_CUTOFF_HZ,
};
use crate::levels::{calibrate_strain_for_gap, ExcitedParams, GroundParams, LevelModel, StateLabel, NUM_STATES};
use crate::{hz, Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Files a run may produce; anything in this list is removed on failure.
const OUTPUT_FILES: [&str; 5] = ["result.csv", "fits.json", "meta.json", "config.json", "trajectory.csv"];

#[derive(Debug, Parser)]
#[command(name = "nvsim", version, about = "NV⁻ center optical and spin dynamics simulator")]
pub struct Cli {
    /// Physical-constants table replacing the built-in one.
    #[arg(long, global = true)]
    pub constants: Option<PathBuf>,
    /// Worker threads for scans (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Photoluminescence excitation spectrum.
    Ple(RunArgs),
    /// Two-step optical spin pumping.
    Pump(RunArgs),
    /// Microwave Rabi oscillation read out optically.
    #[command(name = "rabi-mw")]
    RabiMw(RunArgs),
    /// All-optical two-photon Rabi oscillations with detuning jitter.
    #[command(name = "rabi-2photon")]
    RabiTwoPhoton(RunArgs),
    /// Excited-state population over (one-photon detuning, modulation frequency).
    Darkmap(RunArgs),
    /// Free-form pulse sequence; writes the density-matrix trajectory.
    Simulate(RunArgs),
    /// Inspect the physical-constants table.
    Constants {
        #[command(subcommand)]
        action: ConstantsAction,
    },
    /// Print tool and constants versions.
    Version,
}

#[derive(Debug, Subcommand)]
pub enum ConstantsAction {
    /// Print the active table as JSON.
    Show,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Validate and print the compiled segments without integrating.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Ple,
    Pump,
    RabiMw,
    RabiTwoPhoton,
    Darkmap,
    Simulate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ple => "ple",
            Experiment::Pump => "pump",
            Experiment::RabiMw => "rabi-mw",
            Experiment::RabiTwoPhoton => "rabi-2photon",
            Experiment::Darkmap => "darkmap",
            Experiment::Simulate => "simulate",
        }
    }
}

// ---------------------------------------------------------------------------
// File formats (Hz)

/// Level structure and environment shared by the NV-based recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Splitting between |+1⟩ and |−1⟩.
    pub zeeman_hz: f64,
    /// Transverse strain; `null` calibrates it to the tabulated A₁–A₂ gap.
    pub strain_x_hz: Option<f64>,
    pub strain_y_hz: f64,
    /// Excited-state decay rate; `null` takes the constants table value.
    pub decay_rate_per_s: Option<f64>,
    pub branching: Branching,
    pub ground_dephasing_per_s: f64,
    pub collection_efficiency: f64,
    /// Tones further than this from a transition do not couple it.
    pub cutoff_hz: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            zeeman_hz: 0.0,
            strain_x_hz: None,
            strain_y_hz: 0.0,
            decay_rate_per_s: None,
            branching: Branching::default(),
            ground_dephasing_per_s: 0.0,
            collection_efficiency: 1.0,
            cutoff_hz: DEFAULT_CUTOFF_HZ,
        }
    }
}

impl ModelConfig {
    pub fn setup(&self, constants: &Constants) -> Result<NvSetup> {
        let base = ExcitedParams::from_constants(constants);
        let strain_x = match self.strain_x_hz {
            Some(s) => hz(s),
            None => calibrate_strain_for_gap(&base, constants.a1_a2_gap)?,
        };
        let ground = GroundParams::new(constants.zero_field_splitting, hz(self.zeeman_hz))?;
        let model = LevelModel::new(ground, base.with_strain(strain_x, hz(self.strain_y_hz)))?;
        let mut setup = NvSetup::new(model, constants);
        if let Some(g) = self.decay_rate_per_s {
            setup.gamma = g;
        }
        setup.branching = self.branching;
        setup.ground_dephasing = self.ground_dephasing_per_s;
        setup.efficiency = self.collection_efficiency;
        if !(self.cutoff_hz > 0.0) {
            return Err(Error::Config(format!("cutoff must be positive, got {} Hz", self.cutoff_hz)));
        }
        setup.cutoff = hz(self.cutoff_hz);
        setup.validate()?;
        Ok(setup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolarizationConfig {
    SigmaPlus,
    SigmaMinus,
    Pi,
    LinearX,
    /// Linear in the transverse plane, angle from x.
    Linear { angle_rad: f64 },
    /// Explicit Jones vector, each component as `[re, im]`; normalized on load.
    Jones { sigma_plus: [f64; 2], sigma_minus: [f64; 2], pi: [f64; 2] },
    /// Drives `source`→A₂ while nulling the other |±1⟩→A₂ line.
    Selective { source: StateLabel },
}

impl PolarizationConfig {
    pub fn resolve(&self, setup: Option<&NvSetup>) -> Result<Polarization> {
        let c = |v: [f64; 2]| C64::new(v[0], v[1]);
        Ok(match self {
            PolarizationConfig::SigmaPlus => Polarization::sigma_plus(),
            PolarizationConfig::SigmaMinus => Polarization::sigma_minus(),
            PolarizationConfig::Pi => Polarization::pi(),
            PolarizationConfig::LinearX => Polarization::linear_x(),
            PolarizationConfig::Linear { angle_rad } => {
                if !angle_rad.is_finite() {
                    return Err(Error::Config("polarization angle must be finite".into()));
                }
                Polarization::linear(*angle_rad)
            }
            PolarizationConfig::Jones { sigma_plus, sigma_minus, pi } => {
                Polarization::normalized(c(*sigma_plus), c(*sigma_minus), c(*pi))?
            }
            PolarizationConfig::Selective { source } => setup
                .ok_or_else(|| Error::Config("selective polarization needs a level model".into()))?
                .selective_polarization(*source)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PleModeConfig {
    Steady,
    Pulsed { dwell_s: f64, initial: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PleFile {
    pub model: ModelConfig,
    /// Laser frequency relative to the bare |0⟩ to excited-manifold-centre reference.
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
    pub rabi_hz: f64,
    pub polarization: PolarizationConfig,
    pub mixing_rate_per_s: f64,
    pub mode: PleModeConfig,
}

impl Default for PleFile {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            start_hz: -9e9,
            stop_hz: 9e9,
            points: 9001,
            rabi_hz: 5e6,
            polarization: PolarizationConfig::Linear { angle_rad: std::f64::consts::FRAC_PI_4 },
            mixing_rate_per_s: 1e7,
            mode: PleModeConfig::Steady,
        }
    }
}

impl PleFile {
    pub fn normalize(&self, constants: &Constants) -> Result<(NvSetup, PleConfig)> {
        let setup = self.model.setup(constants)?;
        let cfg = PleConfig {
            start: hz(self.start_hz),
            stop: hz(self.stop_hz),
            points: self.points,
            rabi: hz(self.rabi_hz),
            polarization: self.polarization.resolve(Some(&setup))?,
            mixing_rate: self.mixing_rate_per_s,
            mode: match &self.mode {
                PleModeConfig::Steady => PleMode::Steady,
                PleModeConfig::Pulsed { dwell_s, initial } => PleMode::Pulsed { dwell: *dwell_s, initial: *initial },
            },
        };
        cfg.validate()?;
        Ok((setup, cfg))
    }
}

/// Pumping recipe parameters, shared by `pump` and `rabi-2photon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpFile {
    pub target: PumpTarget,
    pub step1_duration_s: f64,
    pub step1_rabi_hz: f64,
    pub step2_duration_s: f64,
    pub step2_rabi_hz: f64,
    /// Power fraction of the selective beam in the wrong polarization.
    pub polarization_impurity: f64,
    pub imperfections: Imperfections,
    /// Also rerun with each imperfection alone to attribute the infidelity.
    pub attribution: bool,
}

impl Default for PumpFile {
    fn default() -> Self {
        Self::from_config(&PumpConfig::default())
    }
}

impl PumpFile {
    fn from_config(c: &PumpConfig) -> Self {
        Self {
            target: c.target,
            step1_duration_s: c.step1_duration,
            step1_rabi_hz: crate::to_hz(c.step1_rabi),
            step2_duration_s: c.step2_duration,
            step2_rabi_hz: crate::to_hz(c.step2_rabi),
            polarization_impurity: c.polarization_impurity,
            imperfections: c.imperfections,
            attribution: c.attribution,
        }
    }

    pub fn normalize(&self) -> Result<PumpConfig> {
        let cfg = PumpConfig {
            target: self.target,
            step1_duration: self.step1_duration_s,
            step1_rabi: hz(self.step1_rabi_hz),
            step2_duration: self.step2_duration_s,
            step2_rabi: hz(self.step2_rabi_hz),
            polarization_impurity: self.polarization_impurity,
            imperfections: self.imperfections,
            attribution: self.attribution,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpRunFile {
    pub model: ModelConfig,
    pub pump: PumpFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MwRabiFile {
    pub model: ModelConfig,
    pub mw_rabi_hz: f64,
    pub mw_detuning_hz: f64,
    pub duration_s: f64,
    pub points: usize,
    pub pi_readout_coupling_hz: f64,
    pub conventional_rabi_hz: f64,
    pub conventional_duration_s: f64,
    /// Initial populations of |0⟩, |+1⟩, |−1⟩.
    pub initial: [f64; 3],
}

impl Default for MwRabiFile {
    fn default() -> Self {
        let c = MwRabiConfig::default();
        Self {
            // Resolves the |+1⟩→A₂ and |−1⟩→A₂ lines at the π-pulse coupling.
            model: ModelConfig { zeeman_hz: 56e6, ..ModelConfig::default() },
            mw_rabi_hz: crate::to_hz(c.mw_rabi),
            mw_detuning_hz: crate::to_hz(c.mw_detuning),
            duration_s: c.duration,
            points: c.points,
            pi_readout_coupling_hz: crate::to_hz(c.pi_readout_coupling),
            conventional_rabi_hz: crate::to_hz(c.conventional_rabi),
            conventional_duration_s: c.conventional_duration,
            initial: c.initial,
        }
    }
}

impl MwRabiFile {
    pub fn normalize(&self, constants: &Constants) -> Result<(NvSetup, MwRabiConfig)> {
        let setup = self.model.setup(constants)?;
        let cfg = MwRabiConfig {
            mw_rabi: hz(self.mw_rabi_hz),
            mw_detuning: hz(self.mw_detuning_hz),
            duration: self.duration_s,
            points: self.points,
            pi_readout_coupling: hz(self.pi_readout_coupling_hz),
            conventional_rabi: hz(self.conventional_rabi_hz),
            conventional_duration: self.conventional_duration_s,
            initial: self.initial,
        };
        cfg.validate()?;
        Ok((setup, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoPhotonFile {
    pub model: ModelConfig,
    pub powers_w: Vec<f64>,
    pub reference_power_w: f64,
    /// Single-beam coupling at the reference power.
    pub reference_coupling_hz: f64,
    /// Detuning of the |+1⟩→A₂ drive.
    pub detuning_hz: f64,
    pub polarization: PolarizationConfig,
    /// Standard deviation of the static detuning jitter.
    pub jitter_hz: f64,
    pub samples: usize,
    pub sampling: JitterSampling,
    pub seed: u64,
    pub time_points: usize,
    pub window_periods: f64,
    pub long_time_decays: f64,
    pub readout_coupling_hz: f64,
    pub pump: PumpFile,
}

impl Default for TwoPhotonFile {
    fn default() -> Self {
        let c = TwoPhotonConfig::default();
        Self {
            model: ModelConfig::default(),
            powers_w: c.powers.clone(),
            reference_power_w: c.reference_power,
            reference_coupling_hz: crate::to_hz(c.reference_coupling),
            detuning_hz: crate::to_hz(c.detuning),
            polarization: PolarizationConfig::LinearX,
            jitter_hz: crate::to_hz(c.jitter),
            samples: c.samples,
            sampling: c.sampling,
            seed: c.seed,
            time_points: c.time_points,
            window_periods: c.window_periods,
            long_time_decays: c.long_time_decays,
            readout_coupling_hz: crate::to_hz(c.readout_coupling),
            pump: PumpFile::from_config(&c.pump),
        }
    }
}

impl TwoPhotonFile {
    pub fn normalize(&self, constants: &Constants) -> Result<(NvSetup, TwoPhotonConfig)> {
        let setup = self.model.setup(constants)?;
        let cfg = TwoPhotonConfig {
            powers: self.powers_w.clone(),
            reference_power: self.reference_power_w,
            reference_coupling: hz(self.reference_coupling_hz),
            detuning: hz(self.detuning_hz),
            polarization: self.polarization.resolve(Some(&setup))?,
            jitter: hz(self.jitter_hz),
            samples: self.samples,
            sampling: self.sampling,
            seed: self.seed,
            time_points: self.time_points,
            window_periods: self.window_periods,
            pump: self.pump.normalize()?,
            readout_coupling: hz(self.readout_coupling_hz),
            long_time_decays: self.long_time_decays,
        };
        cfg.validate()?;
        Ok((setup, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisFile {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DarkmapModeConfig {
    Steady,
    Pulse { duration_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarkmapFile {
    /// Zero-field splitting; `null` takes the constants table value.
    pub zfs_hz: Option<f64>,
    pub zeeman_hz: f64,
    /// One-photon detuning axis.
    pub delta: AxisFile,
    /// Modulation frequency axis, as offsets from the zero-field splitting.
    pub modulation_offset: AxisFile,
    pub omega0_hz: f64,
    pub omega_plus_hz: f64,
    pub omega_minus_hz: f64,
    pub decay_rate_per_s: Option<f64>,
    /// A₂ branching into (|0⟩, |+1⟩, |−1⟩).
    pub branching: [f64; 3],
    pub mode: DarkmapModeConfig,
}

impl Default for DarkmapFile {
    fn default() -> Self {
        Self {
            zfs_hz: None,
            zeeman_hz: 18e6,
            delta: AxisFile { start_hz: -60e6, stop_hz: 60e6, points: 61 },
            modulation_offset: AxisFile { start_hz: -45e6, stop_hz: 45e6, points: 61 },
            omega0_hz: 5e6,
            omega_plus_hz: 5e6,
            omega_minus_hz: 5e6,
            decay_rate_per_s: None,
            branching: [0.02, 0.49, 0.49],
            mode: DarkmapModeConfig::Steady,
        }
    }
}

impl DarkmapFile {
    pub fn normalize(&self, constants: &Constants) -> Result<DarkmapConfig> {
        let zfs = self.zfs_hz.map(hz).unwrap_or(constants.zero_field_splitting);
        let m = &self.modulation_offset;
        let cfg = DarkmapConfig {
            zfs,
            zeeman: hz(self.zeeman_hz),
            delta: Axis::linspace("delta", "rad_per_s", hz(self.delta.start_hz), hz(self.delta.stop_hz), self.delta.points)?,
            modulation: Axis::linspace("modulation", "rad_per_s", zfs + hz(m.start_hz), zfs + hz(m.stop_hz), m.points)?,
            omega0: C64::new(hz(self.omega0_hz), 0.0),
            omega_plus: C64::new(hz(self.omega_plus_hz), 0.0),
            omega_minus: C64::new(hz(self.omega_minus_hz), 0.0),
            gamma: self.decay_rate_per_s.unwrap_or(constants.excited_decay_rate),
            branching: self.branching,
            mode: match self.mode {
                DarkmapModeConfig::Steady => DarkmapMode::Steady,
                DarkmapModeConfig::Pulse { duration_s } => DarkmapMode::Pulse(duration_s),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Diagonal state from nine populations in label order (0, +1, −1, A1, A2, Ex, Ey, E1, E2).
    Populations { values: Vec<f64> },
    /// A single basis state.
    State { label: StateLabel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidebandFile {
    pub offset_hz: f64,
    pub relative_amplitude: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveFile {
    /// (ground, excited) pair the detuning refers to.
    pub transition: [StateLabel; 2],
    #[serde(default)]
    pub detuning_hz: f64,
    pub polarization: PolarizationConfig,
    pub rabi_hz: f64,
    #[serde(default)]
    pub sidebands: Vec<SidebandFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrowaveFile {
    pub pair: [StateLabel; 2],
    pub rabi_hz: f64,
    #[serde(default)]
    pub detuning_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentFile {
    pub duration_s: f64,
    #[serde(default)]
    pub drives: Vec<DriveFile>,
    #[serde(default)]
    pub microwave: Option<MicrowaveFile>,
    #[serde(default)]
    pub rise_time_s: Option<f64>,
    /// Include spontaneous decay and dephasing during this segment.
    #[serde(default = "yes")]
    pub dissipation: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceFile {
    pub model: ModelConfig,
    pub initial: InitialState,
    pub segments: Vec<SegmentFile>,
    /// Output states per segment, including both ends.
    pub samples_per_segment: usize,
    pub tolerance: f64,
    /// Coherence magnitudes |ρ_ab| added to the trajectory.
    pub coherences: Vec<[StateLabel; 2]>,
}

impl Default for SequenceFile {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            initial: InitialState::State { label: StateLabel::G0 },
            segments: Vec::new(),
            samples_per_segment: 101,
            tolerance: 1e-8,
            coherences: Vec::new(),
        }
    }
}

pub struct PreparedSequence {
    pub setup: NvSetup,
    pub rho0: DensityMatrix,
    pub segments: Vec<PulseSegment>,
    pub options: EvolveOptions,
    pub coherences: Vec<(usize, usize)>,
}

impl SequenceFile {
    pub fn normalize(&self, constants: &Constants) -> Result<PreparedSequence> {
        let setup = self.model.setup(constants)?;
        if self.segments.is_empty() {
            return Err(Error::Config("a sequence needs at least one segment".into()));
        }
        if self.samples_per_segment < 2 {
            return Err(Error::Config("samples_per_segment must be at least 2".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::Config("tolerance must lie in (0, 1)".into()));
        }
        let rho0 = match &self.initial {
            InitialState::Populations { values } => {
                if values.len() != NUM_STATES {
                    return Err(Error::Config(format!(
                        "initial populations need {NUM_STATES} entries, got {}",
                        values.len()
                    )));
                }
                DensityMatrix::diagonal(values)?
            }
            InitialState::State { label } => DensityMatrix::basis(NUM_STATES, label.index()),
        };
        rho0.check()?;
        let mut segments = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
                return Err(Error::Config(format!("segment {i}: duration must be positive")));
            }
            let mut seg = if s.dissipation { setup.segment(s.duration_s)? } else { PulseSegment::new(s.duration_s) };
            seg.rise_time = s.rise_time_s;
            for d in &s.drives {
                let mut drive = DriveField::new(
                    (d.transition[0], d.transition[1]),
                    hz(d.detuning_hz),
                    d.polarization.resolve(Some(&setup))?,
                    hz(d.rabi_hz),
                );
                for sb in &d.sidebands {
                    drive = drive.with_sideband(Sideband {
                        offset: hz(sb.offset_hz),
                        relative_amplitude: sb.relative_amplitude,
                        phase: sb.phase_rad,
                    });
                }
                drive.validate().map_err(|e| Error::Config(format!("segment {i}: {e}")))?;
                seg = seg.with_drive(drive);
            }
            if let Some(m) = &s.microwave {
                seg = seg.with_microwave(MicrowaveDrive {
                    pair: (m.pair[0], m.pair[1]),
                    rabi: hz(m.rabi_hz),
                    detuning: hz(m.detuning_hz),
                });
            }
            segments.push(seg);
        }
        // Compiling here surfaces unknown transitions and frame conflicts before any integration.
        compile_sequence(&segments, &setup.model, &CompileOptions { cutoff: setup.cutoff })?;
        Ok(PreparedSequence {
            setup,
            rho0,
            segments,
            options: EvolveOptions { tol: self.tolerance, samples: self.samples_per_segment, ..EvolveOptions::default() },
            coherences: self.coherences.iter().map(|[a, b]| (a.index(), b.index())).collect(),
        })
    }
}

/// A parsed configuration file, in file units.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExperimentConfig {
    Ple(PleFile),
    Pump(PumpRunFile),
    RabiMw(MwRabiFile),
    RabiTwoPhoton(TwoPhotonFile),
    Darkmap(DarkmapFile),
    Simulate(SequenceFile),
}

/// Configuration converted to library units and checked against every precondition.
pub enum Normalized {
    Ple(NvSetup, PleConfig),
    Pump(NvSetup, PumpConfig),
    RabiMw(NvSetup, MwRabiConfig),
    RabiTwoPhoton(NvSetup, TwoPhotonConfig),
    Darkmap(DarkmapConfig),
    Simulate(PreparedSequence),
}

fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse { path: format!("{origin}: {path}"), message: e.into_inner().to_string() }
    })
}

impl ExperimentConfig {
    pub fn from_str(kind: Experiment, text: &str, origin: &str) -> Result<Self> {
        Ok(match kind {
            Experiment::Ple => ExperimentConfig::Ple(parse(text, origin)?),
            Experiment::Pump => ExperimentConfig::Pump(parse(text, origin)?),
            Experiment::RabiMw => ExperimentConfig::RabiMw(parse(text, origin)?),
            Experiment::RabiTwoPhoton => ExperimentConfig::RabiTwoPhoton(parse(text, origin)?),
            Experiment::Darkmap => ExperimentConfig::Darkmap(parse(text, origin)?),
            Experiment::Simulate => ExperimentConfig::Simulate(parse(text, origin)?),
        })
    }

    pub fn kind(&self) -> Experiment {
        match self {
            ExperimentConfig::Ple(_) => Experiment::Ple,
            ExperimentConfig::Pump(_) => Experiment::Pump,
            ExperimentConfig::RabiMw(_) => Experiment::RabiMw,
            ExperimentConfig::RabiTwoPhoton(_) => Experiment::RabiTwoPhoton,
            ExperimentConfig::Darkmap(_) => Experiment::Darkmap,
            ExperimentConfig::Simulate(_) => Experiment::Simulate,
        }
    }

    /// Canonical JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn normalize(&self, constants: &Constants) -> Result<Normalized> {
        Ok(match self {
            ExperimentConfig::Ple(f) => {
                let (s, c) = f.normalize(constants)?;
                Normalized::Ple(s, c)
            }
            ExperimentConfig::Pump(f) => Normalized::Pump(f.model.setup(constants)?, f.pump.normalize()?),
            ExperimentConfig::RabiMw(f) => {
                let (s, c) = f.normalize(constants)?;
                Normalized::RabiMw(s, c)
            }
            ExperimentConfig::RabiTwoPhoton(f) => {
                let (s, c) = f.normalize(constants)?;
                Normalized::RabiTwoPhoton(s, c)
            }
            ExperimentConfig::Darkmap(f) => Normalized::Darkmap(f.normalize(constants)?),
            ExperimentConfig::Simulate(f) => Normalized::Simulate(f.normalize(constants)?),
        })
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::RabiTwoPhoton(f) => f.seed,
            _ => 0,
        }
    }
}

/// Reads, parses and validates a config file. Unknown keys, malformed values and
/// violated preconditions are all rejected here.
pub fn load_config(kind: Experiment, path: &Path, constants: &Constants) -> Result<(ExperimentConfig, Normalized)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
    let cfg = ExperimentConfig::from_str(kind, &text, &path.display().to_string())?;
    let normalized = cfg.normalize(constants)?;
    Ok((cfg, normalized))
}

// ---------------------------------------------------------------------------
// Running

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub experiment: String,
    /// SHA-256 of the canonical config and the constants table.
    pub config_hash: String,
    pub constants_version: String,
    pub seed: u64,
    pub timestamp: String,
}

pub fn config_hash(cfg: &ExperimentConfig, constants: &Constants) -> String {
    let mut h = Sha256::new();
    h.update(cfg.kind().name().as_bytes());
    h.update([0]);
    h.update(cfg.to_json().as_bytes());
    h.update([0]);
    h.update(constants.to_json().as_bytes());
    hex::encode(h.finalize())
}

/// Files produced by a run, written only after the computation has finished.
pub struct RunOutput {
    pub files: Vec<(&'static str, String)>,
    pub summary: String,
}

fn scan_output(scan: &ScanResult, summary: String) -> Result<RunOutput> {
    scan.validate()?;
    Ok(RunOutput {
        files: vec![
            ("result.csv", scan.to_csv()),
            ("fits.json", serde_json::to_string_pretty(&scan.fits).expect("fits serialize") + "\n"),
        ],
        summary,
    })
}

/// Runs a validated experiment and renders its result files.
pub fn execute(normalized: &Normalized) -> Result<RunOutput> {
    match normalized {
        Normalized::Ple(setup, cfg) => {
            let r = experiments::run_ple_scan(setup, cfg)?;
            let summary = format!(
                "PLE: {} peaks, {} assigned to table lines",
                r.peaks.len(),
                r.peaks.iter().filter(|m| m.excited.is_some()).count()
            );
            scan_output(&r.scan(setup), summary)
        }
        Normalized::Pump(setup, cfg) => {
            let r = experiments::run_optical_pumping(setup, cfg)?;
            scan_output(&r.scan(setup), format!("pumping: target population {:.4}", r.target_population))
        }
        Normalized::RabiMw(setup, cfg) => {
            let r = experiments::run_mw_rabi(setup, cfg)?;
            let summary = format!(
                "microwave Rabi: contrast {:.3} (|0⟩ readout), {:.3} (|+1⟩ readout), correlation {:.3}",
                r.zero_contrast, r.plus_contrast, r.correlation
            );
            scan_output(&r.scan(setup), summary)
        }
        Normalized::RabiTwoPhoton(setup, cfg) => {
            let r = experiments::run_two_photon_rabi(setup, cfg)?;
            let r2 = |l: &Option<crate::fit::OriginLine>| l.as_ref().map_or("n/a".to_string(), |l| format!("{:.6}", l.r_squared));
            let summary = format!(
                "two-photon Rabi: {} powers, Ω′ line R² = {}, Γ line R² = {}",
                r.points.len(),
                r2(&r.rabi_line),
                r2(&r.decay_line)
            );
            scan_output(&r.scan(setup), summary)
        }
        Normalized::Darkmap(cfg) => {
            let r = experiments::run_dark_resonance_map(cfg)?;
            let pos: Vec<String> = r.lines.iter().map(|l| format!("{:.4e} Hz", crate::to_hz(l.position))).collect();
            scan_output(&r.scan(""), format!("dark map: {} dark line(s) at [{}]", r.lines.len(), pos.join(", ")))
        }
        Normalized::Simulate(p) => {
            let compiled = compile_sequence(&p.segments, &p.setup.model, &CompileOptions { cutoff: p.setup.cutoff })?;
            let mut rho = p.rho0.clone();
            let mut times = Vec::new();
            let mut states = Vec::new();
            let mut offset = 0.0;
            for (i, seg) in compiled.iter().enumerate() {
                let traj = evolve(&rho, &seg.generator()?, seg.duration, &p.options)?;
                traj.check()?;
                let skip = usize::from(i > 0);
                times.extend(traj.times.iter().skip(skip).map(|t| t + offset));
                states.extend(traj.states.iter().skip(skip).cloned());
                offset += seg.duration;
                rho = traj.final_state().clone();
            }
            let traj = crate::dynamics::Trajectory { times, states };
            let labels: Vec<String> = StateLabel::ALL.iter().map(|l| l.name().to_string()).collect();
            let final_pops: Vec<String> = StateLabel::ALL
                .iter()
                .map(|l| format!("{}={:.4}", l.name(), rho.population(l.index())))
                .collect();
            Ok(RunOutput {
                files: vec![("trajectory.csv", traj.to_csv(&labels, &p.coherences))],
                summary: format!("sequence of {} segment(s); final populations {}", compiled.len(), final_pops.join(" ")),
            })
        }
    }
}

/// Human-readable list of what would be integrated.
pub fn dry_run(normalized: &Normalized) -> Result<String> {
    let mut out = String::new();
    let mut push = |title: &str, seg: &CompiledSegment| {
        out.push_str(&format!("[{title}] {}\n", seg.describe()));
    };
    match normalized {
        Normalized::Ple(setup, cfg) => {
            let mid = 0.5 * (cfg.start + cfg.stop);
            for (name, laser) in [("probe at start", cfg.start), ("probe at centre", mid), ("probe at stop", cfg.stop)] {
                let seg = compile_probe(&setup.model, laser, cfg.polarization, cfg.rabi, 1e-6, setup.channels()?)?;
                push(name, &seg);
            }
        }
        Normalized::Pump(setup, cfg) => {
            for (i, seg) in experiments::pump_segments(setup, cfg, cfg.imperfections)?.iter().enumerate() {
                push(&format!("pump step {}", i + 1), seg);
            }
        }
        Normalized::RabiMw(setup, cfg) => {
            let mw = setup.segment(cfg.duration)?.with_microwave(MicrowaveDrive {
                pair: (StateLabel::G0, StateLabel::GPlus),
                rabi: cfg.mw_rabi,
                detuning: cfg.mw_detuning,
            });
            push("microwave", &setup.compile(&mw)?);
            let pol = setup.selective_polarization(StateLabel::GPlus)?;
            push(
                "π readout +1→A2",
                &experiments::pi_pulse_segment(setup, StateLabel::GPlus, StateLabel::A2, pol, cfg.pi_readout_coupling)?,
            );
            let ro = setup.segment(cfg.conventional_duration)?.with_drive(DriveField::new(
                (StateLabel::G0, StateLabel::Ex),
                0.0,
                Polarization::linear_x(),
                cfg.conventional_rabi,
            ));
            push("readout 0→Ex", &setup.compile(&ro)?);
        }
        Normalized::RabiTwoPhoton(setup, cfg) => {
            for (i, seg) in experiments::pump_segments(setup, &cfg.pump, cfg.pump.imperfections)?.iter().enumerate() {
                push(&format!("pump step {}", i + 1), seg);
            }
            for &p in &cfg.powers {
                let seg = experiments::two_photon_segment(setup, cfg, p, 1e-6)?;
                push(&format!("drive at {p:e} W (nominal detuning)"), &seg);
            }
            let pol = setup.selective_polarization(StateLabel::GMinus)?;
            push(
                "π readout -1→A2",
                &experiments::pi_pulse_segment(setup, StateLabel::GMinus, StateLabel::A2, pol, cfg.readout_coupling)?,
            );
        }
        Normalized::Darkmap(cfg) => {
            let corner = cfg.params(cfg.delta.values[0], cfg.modulation.values[0]);
            out.push_str(&format!(
                "[tripod] {}×{} grid, Δ ∈ [{:.4e}, {:.4e}] Hz, ω_mod ∈ [{:.4e}, {:.4e}] Hz, Zeeman {:.4e} Hz, mode {:?}\n",
                cfg.delta.values.len(),
                cfg.modulation.values.len(),
                crate::to_hz(cfg.delta.values[0]),
                crate::to_hz(*cfg.delta.values.last().unwrap()),
                crate::to_hz(cfg.modulation.values[0]),
                crate::to_hz(*cfg.modulation.values.last().unwrap()),
                crate::to_hz(cfg.zeeman),
                cfg.mode,
            ));
            out.push_str(&format!("[tripod corner] Δ′ = {:.4e} Hz\n", crate::to_hz(corner.delta_prime())));
        }
        Normalized::Simulate(p) => {
            let compiled = compile_sequence(&p.segments, &p.setup.model, &CompileOptions { cutoff: p.setup.cutoff })?;
            for (i, seg) in compiled.iter().enumerate() {
                push(&format!("segment {i}"), seg);
            }
        }
    }
    Ok(out)
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn clean_outputs(dir: &Path) {
    for name in OUTPUT_FILES.iter().chain(["error.json"].iter()) {
        let _ = fs::remove_file(dir.join(name));
        let _ = fs::remove_file(dir.join(format!(".{name}.tmp")));
    }
}

#[derive(Debug, Serialize)]
struct ErrorReport<'a> {
    kind: &'a str,
    message: String,
}

/// Loads, validates and runs one experiment, writing its output directory.
/// Returns the summary line on success.
pub fn run_experiment(
    kind: Experiment,
    args: &RunArgs,
    constants: &Constants,
    threads: Option<usize>,
) -> Result<String> {
    let (cfg, normalized) = load_config(kind, &args.config, constants)?;
    if args.dry_run {
        return dry_run(&normalized);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let output = pool.install(|| execute(&normalized))?;
    let manifest = RunManifest {
        tool: "nvsim".into(),
        tool_version: TOOL_VERSION.into(),
        experiment: kind.name().into(),
        config_hash: config_hash(&cfg, constants),
        constants_version: constants.version.clone(),
        seed: cfg.seed(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    fs::create_dir_all(&args.out)?;
    clean_outputs(&args.out);
    let mut files = output.files;
    files.push(("config.json", cfg.to_json() + "\n"));
    files.push(("meta.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"));
    for (name, contents) in &files {
        if let Err(e) = write_atomic(&args.out, name, contents) {
            clean_outputs(&args.out);
            return Err(e);
        }
    }
    Ok(output.summary)
}

/// Prints to stdout, ignoring a closed pipe (e.g. `nvsim constants show | head`).
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", text.trim_end());
}

fn report_failure(out: &Path, e: &Error) {
    eprintln!("error: {e}");
    if fs::create_dir_all(out).is_ok() {
        clean_outputs(out);
        let report = ErrorReport { kind: e.kind(), message: e.to_string() };
        let _ = write_atomic(out, "error.json", &(serde_json::to_string_pretty(&report).expect("report") + "\n"));
    }
}

fn active_constants(path: Option<&Path>) -> Result<Constants> {
    match path {
        Some(p) => Constants::from_path(p),
        None => Ok(Constants::default()),
    }
}

/// Exit code: 0 on success, 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

/// Entry point shared by the binary and the tests.
pub fn run(cli: Cli) -> i32 {
    let (kind, args) = match &cli.command {
        Command::Ple(a) => (Experiment::Ple, a),
        Command::Pump(a) => (Experiment::Pump, a),
        Command::RabiMw(a) => (Experiment::RabiMw, a),
        Command::RabiTwoPhoton(a) => (Experiment::RabiTwoPhoton, a),
        Command::Darkmap(a) => (Experiment::Darkmap, a),
        Command::Simulate(a) => (Experiment::Simulate, a),
        Command::Constants { action: ConstantsAction::Show } => {
            return match active_constants(cli.constants.as_deref()) {
                Ok(c) => {
                    emit(&c.to_json());
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            };
        }
        Command::Version => {
            return match active_constants(cli.constants.as_deref()) {
                Ok(c) => {
                    emit(&format!("nvsim {TOOL_VERSION}\nconstants {}", c.version));
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            };
        }
    };
    let result =
        active_constants(cli.constants.as_deref()).and_then(|c| run_experiment(kind, args, &c, cli.threads));
    match result {
        Ok(summary) => {
            emit(&summary);
            0
        }
        Err(e) => {
            if !args.dry_run {
                report_failure(&args.out, &e);
            } else {
                eprintln!("error: {e}");
            }
            exit_code(&e)
        }
    }
}
