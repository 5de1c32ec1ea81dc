//! Laser and microwave tones, pulse segments, and their compilation into
//! rotating-frame Hamiltonians on the nine-level model.
//!
//! Each tone couples the transitions within `cutoff` of its own frequency, plus the
//! transition it names. A microwave tone couples a pair of ground sublevels. The
//! rotating frame assigns a phase rate `θ_k` to every level such that
//! `θ_e − θ_g = ω_tone` on every retained coupling, which leaves a static
//! Hamiltonian with diagonal entries `E_k − θ_k`. Two tones that demand different
//! rates for the same level cannot share a static frame and are rejected.

use std::collections::VecDeque;

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{liouvillian, CMatrix, CollapseChannel, Envelope, Generator, Liouvillian};
use crate::levels::{LevelModel, StateLabel, Transition, NUM_STATES};
use crate::{hz, Error, Result};

/// Default capture range of a tone.
pub const DEFAULT_CUTOFF_HZ: f64 = 500e6;
/// Default relative amplitude of a modulation sideband.
pub const DEFAULT_SIDEBAND_AMPLITUDE: f64 = 0.5;

/// Jones vector over the (σ⁺, σ⁻, π) basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polarization {
    pub sigma_plus: C64,
    pub sigma_minus: C64,
    pub pi: C64,
}

impl Polarization {
    pub fn new(sigma_plus: C64, sigma_minus: C64, pi: C64) -> Result<Self> {
        let p = Self { sigma_plus, sigma_minus, pi };
        p.validate()?;
        Ok(p)
    }

    /// Rescales an arbitrary nonzero Jones vector to unit norm.
    pub fn normalized(sigma_plus: C64, sigma_minus: C64, pi: C64) -> Result<Self> {
        let n = (sigma_plus.norm_sqr() + sigma_minus.norm_sqr() + pi.norm_sqr()).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Config("polarization vector must be nonzero".into()));
        }
        let s = C64::new(1.0 / n, 0.0);
        Ok(Self { sigma_plus: sigma_plus * s, sigma_minus: sigma_minus * s, pi: pi * s })
    }

    pub fn sigma_plus() -> Self {
        Self { sigma_plus: C64::new(1.0, 0.0), sigma_minus: C64::new(0.0, 0.0), pi: C64::new(0.0, 0.0) }
    }

    pub fn sigma_minus() -> Self {
        Self { sigma_plus: C64::new(0.0, 0.0), sigma_minus: C64::new(1.0, 0.0), pi: C64::new(0.0, 0.0) }
    }

    /// Linear polarization in the transverse plane at angle `angle` from x.
    pub fn linear(angle: f64) -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            sigma_plus: C64::from_polar(r, -angle),
            sigma_minus: C64::from_polar(r, angle),
            pi: C64::new(0.0, 0.0),
        }
    }

    pub fn linear_x() -> Self {
        Self::linear(0.0)
    }

    pub fn pi() -> Self {
        Self { sigma_plus: C64::new(0.0, 0.0), sigma_minus: C64::new(0.0, 0.0), pi: C64::new(1.0, 0.0) }
    }

    pub fn norm(&self) -> f64 {
        (self.sigma_plus.norm_sqr() + self.sigma_minus.norm_sqr() + self.pi.norm_sqr()).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if (self.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("polarization vector has norm {}, expected 1", self.norm())));
        }
        Ok(())
    }

    /// Transverse polarization with zero projection on `suppress`, phased so that its
    /// projection on `keep` is real and positive. At zero strain this is pure σ∓ for
    /// the |±1⟩→|A₂⟩ pair; with strain mixing it is the polarization a selective laser
    /// would be tuned to.
    pub fn selective(keep: &Transition, suppress: &Transition) -> Result<Self> {
        let d = &suppress.dipole;
        let mut p = Self::normalized(d.sigma_minus, -d.sigma_plus, C64::new(0.0, 0.0))?;
        let a = p.project(keep);
        if a.norm() < 1e-12 {
            return Err(Error::Config(format!(
                "no transverse polarization addresses {}→{} while suppressing {}→{}",
                keep.ground, keep.excited, suppress.ground, suppress.excited
            )));
        }
        let phase = a.conj() / a.norm();
        p.sigma_plus *= phase;
        p.sigma_minus *= phase;
        Ok(p)
    }

    /// Polarization-weighted dipole amplitude `ε · d` of a transition.
    pub fn project(&self, t: &Transition) -> C64 {
        let d = &t.dipole;
        let mut a = C64::new(0.0, 0.0);
        // Skip exact zeros so structural selection rules survive as exact zeros.
        if self.sigma_plus != C64::new(0.0, 0.0) && d.sigma_plus != C64::new(0.0, 0.0) {
            a += self.sigma_plus * d.sigma_plus;
        }
        if self.sigma_minus != C64::new(0.0, 0.0) && d.sigma_minus != C64::new(0.0, 0.0) {
            a += self.sigma_minus * d.sigma_minus;
        }
        if self.pi != C64::new(0.0, 0.0) && d.pi != C64::new(0.0, 0.0) {
            a += self.pi * d.pi;
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sideband {
    /// Frequency offset from the carrier (rad/s); negative for the lower sideband.
    pub offset: f64,
    pub relative_amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveField {
    /// Named (ground, excited) transition the carrier detuning refers to.
    pub target: (StateLabel, StateLabel),
    /// Positive when the carrier is below the target transition.
    pub detuning: f64,
    pub polarization: Polarization,
    pub rabi: f64,
    pub sidebands: Vec<Sideband>,
}

impl DriveField {
    pub fn new(target: (StateLabel, StateLabel), detuning: f64, polarization: Polarization, rabi: f64) -> Self {
        Self { target, detuning, polarization, rabi, sidebands: Vec::new() }
    }

    pub fn with_sideband(mut self, sideband: Sideband) -> Self {
        self.sidebands.push(sideband);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.polarization.validate()?;
        if !(self.rabi.is_finite() && self.rabi >= 0.0) {
            return Err(Error::Config(format!("Rabi amplitude must be non-negative, got {}", self.rabi)));
        }
        if !self.detuning.is_finite() {
            return Err(Error::Config("detuning must be finite".into()));
        }
        if !self.target.0.is_ground() || !self.target.1.is_excited() {
            return Err(Error::Config(format!(
                "drive target {}→{} is not a ground→excited pair",
                self.target.0, self.target.1
            )));
        }
        for s in &self.sidebands {
            if !(s.relative_amplitude.is_finite() && s.relative_amplitude >= 0.0) {
                return Err(Error::Config("sideband amplitude must be non-negative".into()));
            }
            if !(s.offset.is_finite() && s.phase.is_finite()) {
                return Err(Error::Config("sideband offset and phase must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Microwave tone between two ground sublevels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicrowaveDrive {
    pub pair: (StateLabel, StateLabel),
    pub rabi: f64,
    /// Positive when the tone is below the (lower → upper) transition.
    pub detuning: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSegment {
    pub duration: f64,
    pub drives: Vec<DriveField>,
    pub microwave: Option<MicrowaveDrive>,
    pub channels: Vec<CollapseChannel>,
    /// Smoothed pulse edges of this length; `None` for rectangular.
    pub rise_time: Option<f64>,
}

impl PulseSegment {
    pub fn new(duration: f64) -> Self {
        Self { duration, drives: Vec::new(), microwave: None, channels: Vec::new(), rise_time: None }
    }

    pub fn with_drive(mut self, d: DriveField) -> Self {
        self.drives.push(d);
        self
    }

    pub fn with_microwave(mut self, m: MicrowaveDrive) -> Self {
        self.microwave = Some(m);
        self
    }

    pub fn with_channels(mut self, channels: Vec<CollapseChannel>) -> Self {
        self.channels = channels;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompileOptions {
    pub cutoff: f64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { cutoff: hz(DEFAULT_CUTOFF_HZ) }
    }
}

/// One retained coupling `H[to, from] = −amplitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub from: StateLabel,
    pub to: StateLabel,
    pub amplitude: C64,
    /// Tone frequency (rad/s, same reference as the transition table).
    pub tone_frequency: f64,
    /// Transition frequency minus tone frequency.
    pub detuning: f64,
    pub source: String,
    /// False for couplings kept only by the |A₁⟩ partner rule; those yield to
    /// in-range couplings when the two cannot share a frame.
    pub essential: bool,
}

#[derive(Debug, Clone)]
pub struct CompiledSegment {
    pub duration: f64,
    /// Full rotating-frame Hamiltonian.
    pub hamiltonian: CMatrix,
    /// Coupling part only; the part switched by the envelope.
    pub drive_hamiltonian: CMatrix,
    pub channels: Vec<CollapseChannel>,
    pub envelope: Envelope,
    /// Frame phase rates θ_k.
    pub frame: [f64; NUM_STATES],
    pub couplings: Vec<Coupling>,
    pub log: Vec<String>,
}

impl CompiledSegment {
    pub fn liouvillian(&self) -> Result<Liouvillian> {
        liouvillian(&self.hamiltonian, &self.channels)
    }

    pub fn is_rectangular(&self) -> bool {
        matches!(self.envelope, Envelope::Rectangular)
    }

    /// Generator for the adaptive integrator, honoring the envelope.
    pub fn generator(&self) -> Result<Generator> {
        if self.is_rectangular() {
            return Ok(Generator::constant(self.liouvillian()?));
        }
        let static_part = &self.hamiltonian - &self.drive_hamiltonian;
        Generator::with_envelope(liouvillian(&static_part, &self.channels)?, &self.drive_hamiltonian, self.envelope)
    }

    /// Short human-readable description for dry runs.
    pub fn describe(&self) -> String {
        let mut s = format!("duration {:.6e} s, {} coupling(s)", self.duration, self.couplings.len());
        for c in &self.couplings {
            s.push_str(&format!(
                "\n  {}→{} |Ω| = 2π×{:.6e} Hz, detuning 2π×{:.6e} Hz ({})",
                c.from,
                c.to,
                crate::to_hz(c.amplitude.norm()),
                crate::to_hz(c.detuning),
                c.source
            ));
        }
        for l in &self.log {
            s.push_str(&format!("\n  note: {l}"));
        }
        s
    }
}

struct Tone {
    frequency: f64,
    amplitude: C64,
    polarization: Polarization,
    /// Transition that is coupled regardless of the cutoff.
    named: Option<(StateLabel, StateLabel)>,
    source: String,
}

fn expand_tones(drive: &DriveField, index: usize, model: &LevelModel) -> Result<Vec<Tone>> {
    let target = model.transition(drive.target.0, drive.target.1).ok_or_else(|| {
        Error::Config(format!(
            "drive {index} references {}→{}, which has no dipole in the transition table",
            drive.target.0, drive.target.1
        ))
    })?;
    let carrier = target.frequency - drive.detuning;
    let mut tones = vec![Tone {
        frequency: carrier,
        amplitude: C64::new(drive.rabi, 0.0),
        polarization: drive.polarization,
        named: Some(drive.target),
        source: format!("drive {index} carrier"),
    }];
    for (k, sb) in drive.sidebands.iter().enumerate() {
        if sb.relative_amplitude == 0.0 {
            continue;
        }
        tones.push(Tone {
            frequency: carrier + sb.offset,
            amplitude: C64::from_polar(drive.rabi * sb.relative_amplitude, sb.phase),
            polarization: drive.polarization,
            named: None,
            source: format!("drive {index} sideband {k}"),
        });
    }
    Ok(tones)
}

fn couples_a1_partner(t: &Transition, coupled: &[(StateLabel, StateLabel)]) -> bool {
    t.excited == StateLabel::A1
        && matches!(t.ground, StateLabel::GPlus | StateLabel::GMinus)
        && coupled
            .iter()
            .any(|&(g, e)| e == StateLabel::A2 && matches!(g, StateLabel::GPlus | StateLabel::GMinus))
}

/// Compiles each segment into a static rotating-frame Hamiltonian and its channels.
pub fn compile_sequence(
    seq: &[PulseSegment],
    model: &LevelModel,
    opts: &CompileOptions,
) -> Result<Vec<CompiledSegment>> {
    seq.iter().enumerate().map(|(i, s)| compile_segment(s, model, opts).map_err(|e| prefix(e, i))).collect()
}

fn prefix(e: Error, i: usize) -> Error {
    match e {
        Error::Compile(m) => Error::Compile(format!("segment {i}: {m}")),
        Error::Config(m) => Error::Config(format!("segment {i}: {m}")),
        other => other,
    }
}

pub fn compile_segment(seg: &PulseSegment, model: &LevelModel, opts: &CompileOptions) -> Result<CompiledSegment> {
    if !(seg.duration.is_finite() && seg.duration > 0.0) {
        return Err(Error::Config(format!("segment duration must be positive, got {}", seg.duration)));
    }
    if !(opts.cutoff.is_finite() && opts.cutoff >= 0.0) {
        return Err(Error::Config("cutoff must be non-negative".into()));
    }
    if let Some(r) = seg.rise_time {
        if !(r.is_finite() && r >= 0.0 && 2.0 * r <= seg.duration) {
            return Err(Error::Config(format!("rise time {r} must lie in [0, duration/2]")));
        }
    }
    for ch in &seg.channels {
        if ch.operator.nrows() != NUM_STATES {
            return Err(Error::Dimension(format!("channel `{}` is not a nine-level operator", ch.label)));
        }
    }
    let energies = model.energies();
    let mut log = Vec::new();
    let mut couplings: Vec<Coupling> = Vec::new();

    let mut tones = Vec::new();
    for (i, d) in seg.drives.iter().enumerate() {
        d.validate().map_err(|e| prefix_drive(e, i))?;
        tones.extend(expand_tones(d, i, model)?);
    }
    for tone in &tones {
        let mut coupled: Vec<(StateLabel, StateLabel)> = Vec::new();
        let mut picked: Vec<(&Transition, C64, bool)> = Vec::new();
        for t in &model.table.entries {
            let amp = tone.polarization.project(t);
            if amp == C64::new(0.0, 0.0) {
                continue;
            }
            let named = tone.named == Some((t.ground, t.excited));
            let named_freq = tone
                .named
                .and_then(|(g, e)| model.transition(g, e))
                .map(|n| (t.frequency - n.frequency).abs() <= opts.cutoff)
                .unwrap_or(false);
            let near = (t.frequency - tone.frequency).abs() <= opts.cutoff;
            if named || named_freq || near {
                coupled.push((t.ground, t.excited));
                picked.push((t, amp, true));
            }
        }
        for t in &model.table.entries {
            if coupled.contains(&(t.ground, t.excited)) || !couples_a1_partner(t, &coupled) {
                continue;
            }
            let amp = tone.polarization.project(t);
            if amp != C64::new(0.0, 0.0) {
                picked.push((t, amp, false));
            }
        }
        if picked.is_empty() {
            let msg = format!(
                "{} at 2π×{:.6e} Hz couples no transition within the cutoff and is dropped",
                tone.source,
                crate::to_hz(tone.frequency)
            );
            log::info!("{msg}");
            log.push(msg);
            continue;
        }
        for (t, amp, essential) in picked {
            couplings.push(Coupling {
                from: t.ground,
                to: t.excited,
                amplitude: tone.amplitude * amp,
                tone_frequency: tone.frequency,
                detuning: t.frequency - tone.frequency,
                source: tone.source.clone(),
                essential,
            });
        }
    }
    if let Some(mw) = &seg.microwave {
        let (a, b) = mw.pair;
        if !(a.is_ground() && b.is_ground() && a != b) {
            return Err(Error::Config(format!("microwave pair {a}, {b} must be two distinct ground states")));
        }
        if !(mw.rabi.is_finite() && mw.rabi >= 0.0 && mw.detuning.is_finite()) {
            return Err(Error::Config("microwave Rabi amplitude must be non-negative and detuning finite".into()));
        }
        let (lo, hi) = if energies[a.index()] <= energies[b.index()] { (a, b) } else { (b, a) };
        let f = energies[hi.index()] - energies[lo.index()];
        couplings.push(Coupling {
            from: lo,
            to: hi,
            amplitude: C64::new(mw.rabi, 0.0),
            tone_frequency: f - mw.detuning,
            detuning: mw.detuning,
            source: "microwave".into(),
            essential: true,
        });
    }

    let (mut kept, extras): (Vec<Coupling>, Vec<Coupling>) = couplings.into_iter().partition(|c| c.essential);
    let mut frame = assign_frame(&energies, &kept)?;
    for x in extras {
        kept.push(x);
        match assign_frame(&energies, &kept) {
            Ok(f) => frame = f,
            Err(_) => {
                let x = kept.pop().unwrap();
                let msg = format!("{} on {}→{} conflicts with an in-range coupling and is dropped", x.source, x.from, x.to);
                log::info!("{msg}");
                log.push(msg);
            }
        }
    }
    let couplings = kept;
    let mut h = CMatrix::zeros(NUM_STATES, NUM_STATES);
    let mut hd = CMatrix::zeros(NUM_STATES, NUM_STATES);
    for k in 0..NUM_STATES {
        h[(k, k)] = C64::new(energies[k] - frame[k], 0.0);
    }
    for c in &couplings {
        let (i, j) = (c.to.index(), c.from.index());
        hd[(i, j)] -= c.amplitude;
        hd[(j, i)] -= c.amplitude.conj();
    }
    h += &hd;
    let envelope = match seg.rise_time {
        Some(r) if r > 0.0 => Envelope::SmoothEdges { rise: r, duration: seg.duration },
        _ => Envelope::Rectangular,
    };
    Ok(CompiledSegment {
        duration: seg.duration,
        hamiltonian: h,
        drive_hamiltonian: hd,
        channels: seg.channels.clone(),
        envelope,
        frame,
        couplings,
        log,
    })
}

/// Compiles a single scanning probe tone at absolute frequency `laser` (same reference
/// as the transition table). One tone admits the frame with all grounds at rest and all
/// excited levels rotating at `laser`, so every dipole-allowed transition is kept.
pub fn compile_probe(
    model: &LevelModel,
    laser: f64,
    polarization: Polarization,
    rabi: f64,
    duration: f64,
    channels: Vec<CollapseChannel>,
) -> Result<CompiledSegment> {
    polarization.validate()?;
    if !(rabi.is_finite() && rabi >= 0.0 && laser.is_finite()) {
        return Err(Error::Config("probe Rabi amplitude must be non-negative and frequency finite".into()));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Config(format!("segment duration must be positive, got {duration}")));
    }
    let energies = model.energies();
    let mut frame = [0.0; NUM_STATES];
    for e in StateLabel::EXCITED {
        frame[e.index()] = laser;
    }
    let couplings: Vec<Coupling> = model
        .table
        .entries
        .iter()
        .filter(|t| polarization.project(t) != C64::new(0.0, 0.0))
        .map(|t| Coupling {
            from: t.ground,
            to: t.excited,
            amplitude: polarization.project(t) * rabi,
            tone_frequency: laser,
            detuning: t.frequency - laser,
            source: "probe".into(),
            essential: true,
        })
        .collect();
    let mut h = CMatrix::zeros(NUM_STATES, NUM_STATES);
    let mut hd = CMatrix::zeros(NUM_STATES, NUM_STATES);
    for k in 0..NUM_STATES {
        h[(k, k)] = C64::new(energies[k] - frame[k], 0.0);
    }
    for c in &couplings {
        let (i, j) = (c.to.index(), c.from.index());
        hd[(i, j)] -= c.amplitude;
        hd[(j, i)] -= c.amplitude.conj();
    }
    h += &hd;
    Ok(CompiledSegment {
        duration,
        hamiltonian: h,
        drive_hamiltonian: hd,
        channels,
        envelope: Envelope::Rectangular,
        frame,
        couplings,
        log: Vec::new(),
    })
}

fn prefix_drive(e: Error, i: usize) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("drive {i}: {m}")),
        other => other,
    }
}

/// Phase rates with `θ_to − θ_from = ω_tone` on every coupling. Each connected
/// component is gauged so that the upper level of its first coupling sits at zero.
fn assign_frame(energies: &[f64; NUM_STATES], couplings: &[Coupling]) -> Result<[f64; NUM_STATES]> {
    let mut theta: [Option<f64>; NUM_STATES] = [None; NUM_STATES];
    let mut via: [Option<usize>; NUM_STATES] = [None; NUM_STATES];
    let scale = energies.iter().fold(1.0_f64, |m, e| m.max(e.abs()));
    let tol = 1e-9 * scale;
    for c0 in couplings {
        if theta[c0.to.index()].is_some() || theta[c0.from.index()].is_some() {
            continue;
        }
        let root = c0.to.index();
        theta[root] = Some(energies[root]);
        let mut queue = VecDeque::from([root]);
        while let Some(node) = queue.pop_front() {
            let tn = theta[node].unwrap();
            for (ci, c) in couplings.iter().enumerate() {
                let (other, value) = if c.to.index() == node {
                    (c.from.index(), tn - c.tone_frequency)
                } else if c.from.index() == node {
                    (c.to.index(), tn + c.tone_frequency)
                } else {
                    continue;
                };
                match theta[other] {
                    None => {
                        theta[other] = Some(value);
                        via[other] = Some(ci);
                        queue.push_back(other);
                    }
                    Some(existing) if (existing - value).abs() > tol => {
                        let prev = via[other].map(|p| &couplings[p]).unwrap_or(c0);
                        return Err(Error::Compile(format!(
                            "no common rotating frame: {} on {}→{} and {} on {}→{} assign conflicting frames to {}",
                            prev.source,
                            prev.from,
                            prev.to,
                            c.source,
                            c.from,
                            c.to,
                            StateLabel::from_index(other).unwrap()
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    let mut out = [0.0; NUM_STATES];
    for k in 0..NUM_STATES {
        out[k] = theta[k].unwrap_or(energies[k]);
    }
    Ok(out)
}

/// Parameters of the four-level tripod `{|0⟩, |+1⟩, |−1⟩, |A₂⟩}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripodParams {
    /// One-photon detuning Δ of the carrier from |0⟩→|A₂⟩.
    pub delta: f64,
    pub zfs: f64,
    pub modulation: f64,
    /// Zeeman splitting δ.
    pub zeeman: f64,
    pub omega0: C64,
    pub omega_plus: C64,
    pub omega_minus: C64,
}

impl TripodParams {
    /// Δ′ = Δ + Δ_ZFS − ω_mod.
    pub fn delta_prime(&self) -> f64 {
        self.delta + self.zfs - self.modulation
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [self.delta, self.zfs, self.modulation, self.zeeman];
        let cplx = [self.omega0, self.omega_plus, self.omega_minus];
        if reals.iter().any(|x| !x.is_finite()) || cplx.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Config("tripod parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Tripod basis order used by [`tripod_hamiltonian`].
pub const TRIPOD_BASIS: [StateLabel; 4] = [StateLabel::G0, StateLabel::GPlus, StateLabel::GMinus, StateLabel::A2];
pub const TRIPOD_EXCITED: usize = 3;

/// `H = −Δ|0⟩⟨0| − (Δ′+δ/2)|+1⟩⟨+1| − (Δ′−δ/2)|−1⟩⟨−1| − (Ω₀|A₂⟩⟨0| + Ω₊|A₂⟩⟨+1| + Ω₋|A₂⟩⟨−1| + h.c.)`
pub fn tripod_hamiltonian(p: &TripodParams) -> Matrix4<C64> {
    let dp = p.delta_prime();
    let mut h = Matrix4::<C64>::zeros();
    h[(0, 0)] = C64::new(-p.delta, 0.0);
    h[(1, 1)] = C64::new(-(dp + 0.5 * p.zeeman), 0.0);
    h[(2, 2)] = C64::new(-(dp - 0.5 * p.zeeman), 0.0);
    for (k, om) in [p.omega0, p.omega_plus, p.omega_minus].into_iter().enumerate() {
        h[(3, k)] = -om;
        h[(k, 3)] = -om.conj();
    }
    h
}

/// Decay of |A₂⟩ into the three ground states with `branching` = [b₀, b₊, b₋].
pub fn tripod_channels(gamma: f64, branching: [f64; 3]) -> Result<Vec<CollapseChannel>> {
    (0..3).map(|g| CollapseChannel::decay(4, TRIPOD_EXCITED, g, gamma * branching[g])).collect()
}

pub fn tripod_liouvillian(p: &TripodParams, gamma: f64, branching: [f64; 3]) -> Result<Liouvillian> {
    p.validate()?;
    let h = CMatrix::from_iterator(4, 4, tripod_hamiltonian(p).iter().cloned());
    liouvillian(&h, &tripod_channels(gamma, branching)?)
}

pub fn tripod_vector(v: &Vector4<C64>) -> crate::dynamics::CVector {
    crate::dynamics::CVector::from_iterator(4, v.iter().cloned())
}

/// Per-excited-state branching into (|0⟩, |+1⟩, |−1⟩).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branching {
    pub a1: [f64; 3],
    pub a2: [f64; 3],
    pub ex: [f64; 3],
    pub ey: [f64; 3],
    pub e1: [f64; 3],
    pub e2: [f64; 3],
}

impl Default for Branching {
    /// Model choice: Eₓ/E_y mostly spin-conserving, the spin-orbit states split evenly
    /// between |±1⟩ with a small leak to |0⟩.
    fn default() -> Self {
        let spin_orbit = [0.005, 0.4975, 0.4975];
        let orbital = [0.97, 0.015, 0.015];
        Self { a1: spin_orbit, a2: spin_orbit, ex: orbital, ey: orbital, e1: spin_orbit, e2: spin_orbit }
    }
}

impl Branching {
    pub fn get(&self, e: StateLabel) -> [f64; 3] {
        match e {
            StateLabel::A1 => self.a1,
            StateLabel::A2 => self.a2,
            StateLabel::Ex => self.ex,
            StateLabel::Ey => self.ey,
            StateLabel::E1 => self.e1,
            StateLabel::E2 => self.e2,
            _ => [0.0; 3],
        }
    }

    pub fn set(&mut self, e: StateLabel, b: [f64; 3]) {
        match e {
            StateLabel::A1 => self.a1 = b,
            StateLabel::A2 => self.a2 = b,
            StateLabel::Ex => self.ex = b,
            StateLabel::Ey => self.ey = b,
            StateLabel::E1 => self.e1 = b,
            StateLabel::E2 => self.e2 = b,
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in StateLabel::EXCITED {
            let b = self.get(e);
            if b.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("branching for {e} must be non-negative and sum to 1, got {b:?}")));
            }
        }
        Ok(())
    }

    /// Radiative decay channels of the nine-level model.
    pub fn channels(&self, gamma: f64) -> Result<Vec<CollapseChannel>> {
        let mut out = Vec::new();
        for e in StateLabel::EXCITED {
            for (gi, g) in StateLabel::GROUND.into_iter().enumerate() {
                let r = gamma * self.get(e)[gi];
                if r > 0.0 {
                    let mut ch = CollapseChannel::decay(NUM_STATES, e.index(), g.index(), r)?;
                    ch.label = format!("{e}->{g}");
                    out.push(ch);
                }
            }
        }
        Ok(out)
    }
}
