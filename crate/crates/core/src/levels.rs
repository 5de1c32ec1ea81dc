//! Fine structure of the NV⁻ ground (³A₂) and optically excited (³E) triplets.
//!
//! The excited-state Hamiltonian is written in the product basis
//! `{X, Y} ⊗ {m_s = +1, 0, −1}` with axial and transverse spin-orbit,
//! axial and transverse spin-spin, and transverse strain terms. Eigenstates are
//! labeled by adiabatic continuation from the zero-strain eigenbasis
//! `{A₁, A₂, Eₓ, E_y, E₁, E₂}`, so labels follow the continuous branches of the
//! strain fan rather than energy order.
//!
//! Dipole amplitudes use circular components `d·e± = (d_x ± i d_y)/√2` with the
//! spin-preserving orbital dipole normalized to one. With that convention
//! `|A₂⟩` couples to `|+1⟩` through σ⁻ and to `|−1⟩` through σ⁺ with equal
//! sign, while `|A₁⟩` carries the opposite relative sign.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector6};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::constants::Constants;
use crate::{Error, Result};

/// Basis states of the nine-level model, in matrix index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateLabel {
    G0,
    GPlus,
    GMinus,
    A1,
    A2,
    Ex,
    Ey,
    E1,
    E2,
}

pub const NUM_STATES: usize = 9;

impl StateLabel {
    pub const ALL: [StateLabel; 9] = [
        StateLabel::G0,
        StateLabel::GPlus,
        StateLabel::GMinus,
        StateLabel::A1,
        StateLabel::A2,
        StateLabel::Ex,
        StateLabel::Ey,
        StateLabel::E1,
        StateLabel::E2,
    ];
    pub const GROUND: [StateLabel; 3] = [StateLabel::G0, StateLabel::GPlus, StateLabel::GMinus];
    pub const EXCITED: [StateLabel; 6] = [
        StateLabel::A1,
        StateLabel::A2,
        StateLabel::Ex,
        StateLabel::Ey,
        StateLabel::E1,
        StateLabel::E2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_ground(self) -> bool {
        self.index() < 3
    }

    pub fn is_excited(self) -> bool {
        !self.is_ground()
    }

    /// Position within the excited manifold (0..6); `None` for ground states.
    pub fn excited_index(self) -> Option<usize> {
        self.index().checked_sub(3)
    }

    /// Spin projection of a ground state.
    pub fn spin_projection(self) -> Option<i8> {
        match self {
            StateLabel::G0 => Some(0),
            StateLabel::GPlus => Some(1),
            StateLabel::GMinus => Some(-1),
            _ => None,
        }
    }

    /// Column of the product-basis spin index `{+1, 0, −1}` for a ground state.
    fn spin_slot(self) -> Option<usize> {
        match self {
            StateLabel::GPlus => Some(0),
            StateLabel::G0 => Some(1),
            StateLabel::GMinus => Some(2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StateLabel::G0 => "0",
            StateLabel::GPlus => "+1",
            StateLabel::GMinus => "-1",
            StateLabel::A1 => "A1",
            StateLabel::A2 => "A2",
            StateLabel::Ex => "Ex",
            StateLabel::Ey => "Ey",
            StateLabel::E1 => "E1",
            StateLabel::E2 => "E2",
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StateLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Ok(match t {
            "0" | "G0" | "m0" => StateLabel::G0,
            "+1" | "1" | "Gp" | "GPlus" | "p1" => StateLabel::GPlus,
            "-1" | "Gm" | "GMinus" | "m1" => StateLabel::GMinus,
            "A1" => StateLabel::A1,
            "A2" => StateLabel::A2,
            "Ex" => StateLabel::Ex,
            "Ey" => StateLabel::Ey,
            "E1" => StateLabel::E1,
            "E2" => StateLabel::E2,
            _ => return Err(Error::Config(format!("unknown state label `{t}`"))),
        })
    }
}

impl Serialize for StateLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for StateLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ground-state parameters (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundParams {
    pub zfs: f64,
    /// Splitting between `|+1⟩` and `|−1⟩`; `|+1⟩` is the upper level.
    pub zeeman_delta: f64,
    /// Gaussian σ of a static ground-state detuning spread (0 = ideal).
    pub detuning_spread: f64,
}

impl GroundParams {
    pub fn new(zfs: f64, zeeman_delta: f64) -> Result<Self> {
        let p = Self { zfs, zeeman_delta, detuning_spread: 0.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn from_constants(c: &Constants) -> Self {
        Self { zfs: c.zero_field_splitting, zeeman_delta: 0.0, detuning_spread: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zfs.is_finite() && self.zfs > 0.0) {
            return Err(Error::Domain(format!("zero-field splitting must be positive, got {}", self.zfs)));
        }
        if !(self.zeeman_delta.is_finite() && self.zeeman_delta >= 0.0) {
            return Err(Error::Domain(format!("Zeeman splitting must be non-negative, got {}", self.zeeman_delta)));
        }
        if !(self.detuning_spread.is_finite() && self.detuning_spread >= 0.0) {
            return Err(Error::Domain(format!(
                "detuning spread must be non-negative, got {}",
                self.detuning_spread
            )));
        }
        Ok(())
    }

    /// Energies of `(|0⟩, |+1⟩, |−1⟩)`.
    pub fn energies(&self) -> [f64; 3] {
        [0.0, self.zfs + 0.5 * self.zeeman_delta, self.zfs - 0.5 * self.zeeman_delta]
    }
}

impl Default for GroundParams {
    fn default() -> Self {
        Self::from_constants(&Constants::default())
    }
}

/// Diagonal ground Hamiltonian in the `(|0⟩, |+1⟩, |−1⟩)` basis.
pub fn build_ground_hamiltonian(params: &GroundParams) -> Matrix3<C64> {
    let e = params.energies();
    Matrix3::from_diagonal(&nalgebra::Vector3::new(e[0].into(), e[1].into(), e[2].into()))
}

/// Excited-state parameters (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitedParams {
    /// Axial spin-orbit λ∥. Positive values put the A states at the top.
    pub spin_orbit_axial: f64,
    /// Transverse spin-orbit λ⊥; mixes `Eₓ,E_y` with `E₁,E₂` and enables cross transitions.
    pub spin_orbit_transverse: f64,
    /// Axial spin-spin D∥.
    pub spin_spin_axial: f64,
    /// Transverse spin-spin D⊥; the zero-strain A₁–A₂ splitting is 4 D⊥.
    pub spin_spin_transverse: f64,
    pub strain_x: f64,
    pub strain_y: f64,
    /// Offset added to every excited energy. Zero reports frequencies relative to the zero-phonon line.
    pub optical_reference: f64,
}

impl ExcitedParams {
    pub fn from_constants(c: &Constants) -> Self {
        Self {
            spin_orbit_axial: c.spin_orbit_axial,
            spin_orbit_transverse: c.spin_orbit_transverse,
            spin_spin_axial: c.spin_spin_axial,
            spin_spin_transverse: c.spin_spin_transverse,
            strain_x: 0.0,
            strain_y: 0.0,
            optical_reference: 0.0,
        }
    }

    pub fn with_strain(mut self, strain_x: f64, strain_y: f64) -> Self {
        self.strain_x = strain_x;
        self.strain_y = strain_y;
        self
    }

    pub fn zero_strain(&self) -> Self {
        self.with_strain(0.0, 0.0)
    }

    pub fn strain_magnitude(&self) -> f64 {
        self.strain_x.hypot(self.strain_y)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.spin_orbit_axial,
            self.spin_orbit_transverse,
            self.spin_spin_axial,
            self.spin_spin_transverse,
            self.strain_x,
            self.strain_y,
            self.optical_reference,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("excited-state parameters must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ExcitedParams {
    fn default() -> Self {
        Self::from_constants(&Constants::default())
    }
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn kron(a: &nalgebra::Matrix2<C64>, b: &Matrix3<C64>) -> Matrix6<C64> {
    let mut out = Matrix6::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..3 {
                for l in 0..3 {
                    out[(3 * i + k, 3 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// 6×6 excited-state Hamiltonian in the `{X, Y} ⊗ {+1, 0, −1}` product basis.
pub fn build_excited_hamiltonian(p: &ExcitedParams) -> Matrix6<C64> {
    use nalgebra::Matrix2;
    let i = C64::i();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let sz = Matrix3::new(c(1.0), c(0.0), c(0.0), c(0.0), c(0.0), c(0.0), c(0.0), c(0.0), c(-1.0));
    let sx = Matrix3::new(c(0.0), c(r), c(0.0), c(r), c(0.0), c(r), c(0.0), c(r), c(0.0));
    let sy = Matrix3::new(c(0.0), -i * r, c(0.0), i * r, c(0.0), -i * r, c(0.0), i * r, c(0.0));
    let id3 = Matrix3::<C64>::identity();
    let oz = Matrix2::new(c(1.0), c(0.0), c(0.0), c(-1.0));
    let ox = Matrix2::new(c(0.0), c(1.0), c(1.0), c(0.0));
    let oy = Matrix2::new(c(0.0), -i, i, c(0.0));
    let id2 = Matrix2::<C64>::identity();

    let sz2 = sz * sz;
    let mut h = kron(&oy, &sz) * c(-p.spin_orbit_axial);
    h += kron(&id2, &(sz2 - id3 * c(2.0 / 3.0))) * c(p.spin_spin_axial);
    h -= (kron(&oz, &(sy * sy - sx * sx)) - kron(&ox, &(sx * sy + sy * sx))) * c(p.spin_spin_transverse);
    h += (kron(&oz, &(sx * sz + sz * sx)) - kron(&ox, &(sy * sz + sz * sy))) * c(p.spin_orbit_transverse);
    h += kron(&oz, &id3) * c(p.strain_x) + kron(&ox, &id3) * c(p.strain_y);
    h += Matrix6::identity() * c(p.optical_reference);
    // Exact Hermiticity regardless of rounding in the products above.
    (h + h.adjoint()) * c(0.5)
}

/// Ideal zero-strain eigenvectors, in `StateLabel::EXCITED` order.
pub fn ideal_excited_vectors() -> [Vector6<C64>; 6] {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let i = C64::i();
    // Orbital E± = (X ± iY)/√2; product index = 3·orbital + spin slot {+1, 0, −1}.
    let e_plus = [c(r), i * r];
    let e_minus = [c(r), -i * r];
    let prod = |orb: [C64; 2], slot: usize| {
        let mut v = Vector6::zeros();
        v[slot] = orb[0];
        v[3 + slot] = orb[1];
        v
    };
    let em_p1 = prod(e_minus, 0);
    let ep_m1 = prod(e_plus, 2);
    let em_m1 = prod(e_minus, 2);
    let ep_p1 = prod(e_plus, 0);
    let mut ex = Vector6::zeros();
    ex[1] = c(1.0);
    let mut ey = Vector6::zeros();
    ey[4] = c(1.0);
    [
        (em_p1 - ep_m1) * c(r),
        (em_p1 + ep_m1) * c(r),
        ex,
        ey,
        (em_m1 - ep_p1) * c(r),
        (em_m1 + ep_p1) * c(r),
    ]
}

/// Labeled eigen-decomposition of the excited Hamiltonian, indexed like `StateLabel::EXCITED`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitedEigensystem {
    pub params: ExcitedParams,
    pub energies: [f64; 6],
    pub vectors: [Vector6<C64>; 6],
}

impl ExcitedEigensystem {
    pub fn energy(&self, label: StateLabel) -> f64 {
        self.energies[label.excited_index().expect("excited label")]
    }

    pub fn vector(&self, label: StateLabel) -> &Vector6<C64> {
        &self.vectors[label.excited_index().expect("excited label")]
    }
}

fn sorted_eigen(h: &Matrix6<C64>) -> (Vec<f64>, Vec<Vector6<C64>>) {
    let eig = SymmetricEigen::new(*h);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
    (values, vectors)
}

fn align_phase(v: Vector6<C64>, reference: &Vector6<C64>) -> Vector6<C64> {
    let ov = reference.dotc(&v);
    if ov.norm() < 1e-300 {
        return v;
    }
    v * (ov.conj() / ov.norm())
}

fn permutations6() -> &'static [[usize; 6]] {
    use std::sync::OnceLock;
    static PERMS: OnceLock<Vec<[usize; 6]>> = OnceLock::new();
    PERMS.get_or_init(|| {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool; 6], out: &mut Vec<[usize; 6]>) {
            if prefix.len() == 6 {
                let mut a = [0; 6];
                a.copy_from_slice(prefix);
                out.push(a);
                return;
            }
            for k in 0..6 {
                if !used[k] {
                    used[k] = true;
                    prefix.push(k);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[k] = false;
                }
            }
        }
        let mut out = Vec::with_capacity(720);
        rec(&mut Vec::new(), &mut [false; 6], &mut out);
        out
    })
}

/// Zero-strain labeled basis. Degenerate pairs are resolved by projecting the ideal
/// symmetry-adapted vectors onto each degenerate eigenspace.
fn zero_strain_system(params: &ExcitedParams) -> ExcitedEigensystem {
    let p0 = params.zero_strain();
    let h = build_excited_hamiltonian(&p0);
    let (values, vectors) = sorted_eigen(&h);
    let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for k in 0..6 {
        match clusters.last_mut() {
            Some(cl) if (values[k] - values[*cl.last().unwrap()]).abs() <= tol => cl.push(k),
            _ => clusters.push(vec![k]),
        }
    }
    let ideal = ideal_excited_vectors();
    let project = |cl: &[usize], v: &Vector6<C64>| -> Vector6<C64> {
        cl.iter().fold(Vector6::zeros(), |acc, &k| acc + vectors[k] * vectors[k].dotc(v))
    };
    let weight = |cl: &[usize], v: &Vector6<C64>| project(cl, v).norm_squared();

    // Assign each label to the cluster holding most of its ideal vector.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters.len()];
    for (l, v) in ideal.iter().enumerate() {
        let best = (0..clusters.len())
            .max_by(|&a, &b| weight(&clusters[a], v).total_cmp(&weight(&clusters[b], v)))
            .unwrap();
        members[best].push(l);
    }
    let consistent = members.iter().zip(&clusters).all(|(m, cl)| m.len() == cl.len());

    let mut energies = [0.0; 6];
    let mut out: [Vector6<C64>; 6] = [Vector6::zeros(); 6];
    if consistent {
        for (cl, labels) in clusters.iter().zip(&members) {
            let e = cl.iter().map(|&k| values[k]).sum::<f64>() / cl.len() as f64;
            let mut basis: Vec<Vector6<C64>> = Vec::new();
            for &l in labels {
                let mut v = project(cl, &ideal[l]);
                for b in &basis {
                    v -= b * b.dotc(&v);
                }
                let v = v.normalize();
                basis.push(v);
                energies[l] = e;
                out[l] = align_phase(v, &ideal[l]);
            }
        }
    } else {
        // Accidental degeneracies across symmetry classes: fall back to overlap tracking.
        let ideal_sys = ExcitedEigensystem { params: p0, energies: [0.0; 6], vectors: ideal };
        return relabel(&ideal_sys, &values, &vectors, p0);
    }
    ExcitedEigensystem { params: p0, energies, vectors: out }
}

/// Chooses the label assignment maximizing total squared overlap with `prev`.
/// Permutations are scanned in energy order, so exact ties resolve by energy.
fn relabel(
    prev: &ExcitedEigensystem,
    values: &[f64],
    vectors: &[Vector6<C64>],
    params: ExcitedParams,
) -> ExcitedEigensystem {
    let mut overlap = [[0.0; 6]; 6];
    for l in 0..6 {
        for k in 0..6 {
            overlap[l][k] = prev.vectors[l].dotc(&vectors[k]).norm_sqr();
        }
    }
    let mut best = [0usize; 6];
    let mut best_score = f64::NEG_INFINITY;
    for perm in permutations6() {
        let score: f64 = (0..6).map(|l| overlap[l][perm[l]]).sum();
        if score > best_score + 1e-12 {
            best_score = score;
            best = *perm;
        }
    }
    let mut energies = [0.0; 6];
    let mut out: [Vector6<C64>; 6] = [Vector6::zeros(); 6];
    for l in 0..6 {
        energies[l] = values[best[l]];
        out[l] = align_phase(vectors[best[l]], &prev.vectors[l]);
    }
    ExcitedEigensystem { params, energies, vectors: out }
}

/// Advances a labeled eigensystem to new parameters by maximal-overlap matching.
pub fn track(prev: &ExcitedEigensystem, params: &ExcitedParams) -> ExcitedEigensystem {
    let (values, vectors) = sorted_eigen(&build_excited_hamiltonian(params));
    relabel(prev, &values, &vectors, *params)
}

/// Strain step used when continuing labels from zero strain.
const CONTINUATION_STEP: f64 = crate::TWO_PI * 20e6;

/// Labeled eigensystem at `params`, continued along a straight strain path from zero.
pub fn excited_eigensystem(params: &ExcitedParams) -> ExcitedEigensystem {
    let mut sys = zero_strain_system(params);
    let mag = params.strain_magnitude();
    if mag == 0.0 {
        return sys;
    }
    let steps = ((mag / CONTINUATION_STEP).ceil() as usize).clamp(4, 4000);
    for s in 1..=steps {
        let f = s as f64 / steps as f64;
        let p = params.with_strain(params.strain_x * f, params.strain_y * f);
        sys = track(&sys, &p);
    }
    sys
}

/// Labeled eigensystems along a monotone list of `strain_x` values (other parameters fixed).
pub fn strain_fan(base: &ExcitedParams, strains: &[f64]) -> Vec<ExcitedEigensystem> {
    let mut out = Vec::with_capacity(strains.len());
    let mut current: Option<ExcitedEigensystem> = None;
    for &s in strains {
        let p = base.with_strain(s, 0.0);
        let next = match &current {
            None => excited_eigensystem(&p),
            Some(prev) => {
                // Subdivide large jumps so overlap tracking stays adiabatic.
                let ds = s - prev.params.strain_x;
                let sub = ((ds.abs() / CONTINUATION_STEP).ceil() as usize).max(1);
                let mut sys = prev.clone();
                for k in 1..=sub {
                    let sk = prev.params.strain_x + ds * k as f64 / sub as f64;
                    sys = track(&sys, &base.with_strain(sk, 0.0));
                }
                sys
            }
        };
        current = Some(next.clone());
        out.push(next);
    }
    out
}

/// Eₓ − E_y splitting, the natural strain unit of the excited-state fan.
pub fn exey_splitting(params: &ExcitedParams) -> f64 {
    let sys = excited_eigensystem(params);
    sys.energy(StateLabel::Ex) - sys.energy(StateLabel::Ey)
}

/// A₂ − A₁ splitting.
pub fn a1_a2_gap(params: &ExcitedParams) -> f64 {
    let sys = excited_eigensystem(params);
    sys.energy(StateLabel::A2) - sys.energy(StateLabel::A1)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= 1e-12 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Strain (along x) whose Eₓ–E_y splitting equals `target`.
pub fn strain_for_exey_splitting(base: &ExcitedParams, target: f64) -> Result<f64> {
    if target < 0.0 {
        return Err(Error::Domain("Ex-Ey splitting must be non-negative".into()));
    }
    let f = |s: f64| exey_splitting(&base.with_strain(s, 0.0)) - target;
    let mut hi = target.max(crate::TWO_PI * 1e6);
    let mut tries = 0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 40 {
            return Err(Error::Domain("could not bracket strain for requested Ex-Ey splitting".into()));
        }
    }
    Ok(bisect(0.0, hi, f))
}

/// Strain (along x) at which the A₁–A₂ gap equals `target_gap`.
///
/// The gap shrinks monotonically with strain in the low-strain regime, so the
/// target must not exceed the zero-strain gap `4 D⊥`.
pub fn calibrate_strain_for_gap(base: &ExcitedParams, target_gap: f64) -> Result<f64> {
    let f = |s: f64| a1_a2_gap(&base.with_strain(s, 0.0)) - target_gap;
    let f0 = f(0.0);
    if f0.abs() < 1e-9 * target_gap {
        return Ok(0.0);
    }
    if f0 < 0.0 {
        return Err(Error::Domain(format!(
            "zero-strain A1-A2 gap {:.6e} rad/s is below the target {:.6e} rad/s; no strain reaches it",
            f0 + target_gap,
            target_gap
        )));
    }
    let step = crate::TWO_PI * 100e6;
    let mut hi = step;
    while f(hi) > 0.0 {
        hi += step;
        if hi > crate::TWO_PI * 20e9 {
            return Err(Error::Domain("A1-A2 gap never reaches the target below 20 GHz of strain".into()));
        }
    }
    Ok(bisect(hi - step, hi, f))
}

/// Which spin character a transition connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    SpinPreserving,
    Cross,
}

/// Circular and π dipole components of a transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleAmplitudes {
    pub sigma_plus: C64,
    pub sigma_minus: C64,
    pub pi: C64,
}

impl DipoleAmplitudes {
    pub fn strength(&self) -> f64 {
        (self.sigma_plus.norm_sqr() + self.sigma_minus.norm_sqr() + self.pi.norm_sqr()).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_plus == C64::new(0.0, 0.0)
            && self.sigma_minus == C64::new(0.0, 0.0)
            && self.pi == C64::new(0.0, 0.0)
    }
}

/// Amplitudes below this magnitude are structural zeros and are stored as exact zeros.
pub const DIPOLE_ZERO: f64 = 1e-12;

fn clean(z: C64) -> C64 {
    let re = if z.re.abs() < DIPOLE_ZERO { 0.0 } else { z.re };
    let im = if z.im.abs() < DIPOLE_ZERO { 0.0 } else { z.im };
    C64::new(re, im)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub ground: StateLabel,
    pub excited: StateLabel,
    /// Excited minus ground energy (rad/s), relative to `optical_reference`.
    pub frequency: f64,
    pub kind: TransitionKind,
    pub dipole: DipoleAmplitudes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    pub entries: Vec<Transition>,
}

impl TransitionTable {
    pub fn get(&self, ground: StateLabel, excited: StateLabel) -> Option<&Transition> {
        self.entries.iter().find(|t| t.ground == ground && t.excited == excited)
    }

    /// Distinct line frequencies, merging entries closer than `tol`.
    pub fn distinct_lines(&self, tol: f64) -> Vec<f64> {
        let mut f: Vec<f64> = self.entries.iter().map(|t| t.frequency).collect();
        f.sort_by(f64::total_cmp);
        let mut out: Vec<f64> = Vec::new();
        for v in f {
            match out.last() {
                Some(&last) if (v - last).abs() <= tol => {}
                _ => out.push(v),
            }
        }
        out
    }
}

fn dipole_from_vector(v: &Vector6<C64>, ground: StateLabel) -> DipoleAmplitudes {
    let slot = ground.spin_slot().expect("ground label");
    let cx = v[slot].conj();
    let cy = v[3 + slot].conj();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let i = C64::i();
    DipoleAmplitudes {
        sigma_plus: clean((cx + i * cy) * r),
        sigma_minus: clean((cx - i * cy) * r),
        pi: C64::new(0.0, 0.0),
    }
}

/// Full nine-level model: labeled energies, eigenvectors, and the transition table.
#[derive(Debug, Clone)]
pub struct LevelModel {
    pub ground: GroundParams,
    pub excited: ExcitedParams,
    pub system: ExcitedEigensystem,
    pub table: TransitionTable,
}

impl LevelModel {
    pub fn new(ground: GroundParams, excited: ExcitedParams) -> Result<Self> {
        ground.validate()?;
        excited.validate()?;
        let system = excited_eigensystem(&excited);
        let table = build_table(&ground, &system);
        Ok(Self { ground, excited, system, table })
    }

    /// Energies of all nine states in `StateLabel::ALL` order.
    pub fn energies(&self) -> [f64; NUM_STATES] {
        let g = self.ground.energies();
        let mut out = [0.0; NUM_STATES];
        out[..3].copy_from_slice(&g);
        out[3..].copy_from_slice(&self.system.energies);
        out
    }

    pub fn energy(&self, s: StateLabel) -> f64 {
        self.energies()[s.index()]
    }

    pub fn transition(&self, ground: StateLabel, excited: StateLabel) -> Option<&Transition> {
        self.table.get(ground, excited)
    }
}

/// Transition table for every ground/excited pair with a nonzero dipole.
pub fn transition_table(g: &GroundParams, e: &ExcitedParams) -> Result<TransitionTable> {
    g.validate()?;
    e.validate()?;
    Ok(build_table(g, &excited_eigensystem(e)))
}

fn build_table(g: &GroundParams, sys: &ExcitedEigensystem) -> TransitionTable {
    let ge = g.energies();
    let mut entries = Vec::new();
    for ground in StateLabel::GROUND {
        let slot = ground.spin_slot().unwrap();
        for excited in StateLabel::EXCITED {
            let v = sys.vector(excited);
            let dipole = dipole_from_vector(v, ground);
            if dipole.is_zero() {
                continue;
            }
            let spin_weight = v[slot].norm_sqr() + v[3 + slot].norm_sqr();
            entries.push(Transition {
                ground,
                excited,
                frequency: sys.energy(excited) - ge[ground.index()],
                kind: if spin_weight >= 0.5 { TransitionKind::SpinPreserving } else { TransitionKind::Cross },
                dipole,
            });
        }
    }
    TransitionTable { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{hz, TWO_PI};

    fn hermiticity_defect(h: &Matrix6<C64>) -> f64 {
        (h - h.adjoint()).iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    #[test]
    fn ground_hamiltonian_examples() {
        let g = GroundParams::new(hz(2.88e9), 0.0).unwrap();
        let h = build_ground_hamiltonian(&g);
        assert!((h[(1, 1)].re - hz(2.88e9)).abs() < 1e-3);
        assert_eq!(h[(1, 1)], h[(2, 2)]);

        let g = GroundParams::new(hz(2.88e9), hz(18e6)).unwrap();
        let e = g.energies();
        assert!((e[1] - e[2] - hz(18e6)).abs() < 1e-3);
        assert!((e[1] - e[0] - (g.zfs + 0.5 * g.zeeman_delta)).abs() < 1e-6);

        let zero = GroundParams { zfs: 0.0, zeeman_delta: 0.0, detuning_spread: 0.0 };
        assert_eq!(build_ground_hamiltonian(&zero), Matrix3::zeros());
    }

    #[test]
    fn ground_params_reject_bad_values() {
        assert!(GroundParams::new(-1.0, 0.0).is_err());
        assert!(GroundParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn excited_hamiltonian_is_hermitian() {
        let p = ExcitedParams::default().with_strain(hz(0.7e9), hz(-0.3e9));
        assert!(hermiticity_defect(&build_excited_hamiltonian(&p)) < 1e-12);
    }

    #[test]
    fn zero_strain_degeneracies_and_ordering() {
        let p = ExcitedParams::default();
        let sys = excited_eigensystem(&p);
        let lz = p.spin_orbit_axial;
        assert!((sys.energy(StateLabel::E1) - sys.energy(StateLabel::E2)).abs() / lz < 1e-9);
        assert!((sys.energy(StateLabel::Ex) - sys.energy(StateLabel::Ey)).abs() / lz < 1e-9);
        // A₂ on top, A₁ below it by 4 D⊥.
        let max = sys.energies.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, sys.energy(StateLabel::A2));
        let gap = sys.energy(StateLabel::A2) - sys.energy(StateLabel::A1);
        assert!((gap - 4.0 * p.spin_spin_transverse).abs() / gap < 1e-9);
    }

    #[test]
    fn a_states_are_exact_zero_strain_eigenvectors() {
        let p = ExcitedParams::default();
        let sys = excited_eigensystem(&p);
        let ideal = ideal_excited_vectors();
        for l in [StateLabel::A1, StateLabel::A2] {
            let k = l.excited_index().unwrap();
            assert!((sys.vectors[k].dotc(&ideal[k]).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_rules_at_zero_strain() {
        let table = transition_table(&GroundParams::default(), &ExcitedParams::default()).unwrap();
        let a2p = table.get(StateLabel::GPlus, StateLabel::A2).unwrap().dipole;
        let a2m = table.get(StateLabel::GMinus, StateLabel::A2).unwrap().dipole;
        let a1p = table.get(StateLabel::GPlus, StateLabel::A1).unwrap().dipole;
        let a1m = table.get(StateLabel::GMinus, StateLabel::A1).unwrap().dipole;
        // |+1⟩ → A₂ is σ⁻ only, |−1⟩ → A₂ is σ⁺ only.
        assert_eq!(a2p.sigma_plus, C64::new(0.0, 0.0));
        assert!(a2p.sigma_minus.norm() > 0.5);
        assert_eq!(a2m.sigma_minus, C64::new(0.0, 0.0));
        assert!(a2m.sigma_plus.norm() > 0.5);
        // Opposite relative phase of A₁ compared with A₂.
        let rel_a2 = a2m.sigma_plus / a2p.sigma_minus;
        let rel_a1 = a1m.sigma_plus / a1p.sigma_minus;
        assert!((rel_a2 + rel_a1).norm() < 1e-12, "{rel_a2} vs {rel_a1}");
        assert!((rel_a2.norm() - 1.0).abs() < 1e-12);
        // Cross transitions from |0⟩ into the A states vanish without strain.
        assert!(table.get(StateLabel::G0, StateLabel::A2).is_none());
    }

    #[test]
    fn zero_strain_zero_field_collapses_lines() {
        let table = transition_table(&GroundParams::default(), &ExcitedParams::default()).unwrap();
        // Degenerate pairs collapse: |0⟩ sees Ex/Ey and (via λ⊥) E1/E2; |±1⟩ see A1, A2, E1/E2, Ex/Ey.
        let lines = table.distinct_lines(TWO_PI * 1e3);
        assert!(lines.len() < 12, "{} lines", lines.len());
        for t in &table.entries {
            if t.ground == StateLabel::GMinus {
                let partner = table.get(StateLabel::GPlus, t.excited).unwrap();
                assert!((partner.frequency - t.frequency).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn calibrated_strain_reproduces_gap_and_twelve_lines() {
        let base = ExcitedParams::default();
        let target = hz(3.2e9);
        let s = calibrate_strain_for_gap(&base, target).unwrap();
        assert!(s > 0.0);
        let p = base.with_strain(s, 0.0);
        assert!((a1_a2_gap(&p) - target).abs() / target < 1e-9);
        let table = transition_table(&GroundParams::default(), &p).unwrap();
        assert_eq!(table.entries.len(), 18);
        assert_eq!(table.distinct_lines(TWO_PI * 1e3).len(), 12);
        // |0⟩→A₂ and |±1⟩→A₂ differ by exactly the zero-field splitting.
        let f0 = table.get(StateLabel::G0, StateLabel::A2).unwrap().frequency;
        let fp = table.get(StateLabel::GPlus, StateLabel::A2).unwrap().frequency;
        assert!((f0 - fp - hz(2.88e9)).abs() < 1.0);
        // σ⁻ on |+1⟩→A₂ dominates σ⁻ on |−1⟩→A₂ once strain mixes the states.
        let m = table.get(StateLabel::GMinus, StateLabel::A2).unwrap().dipole.sigma_minus.norm();
        let p1 = table.get(StateLabel::GPlus, StateLabel::A2).unwrap().dipole.sigma_minus.norm();
        assert!(p1 > 5.0 * m);
    }

    #[test]
    fn gap_target_above_zero_strain_gap_is_rejected() {
        let base = ExcitedParams::default();
        assert!(calibrate_strain_for_gap(&base, 5.0 * base.spin_spin_transverse).is_err());
    }

    #[test]
    fn exey_normalization_round_trips() {
        let base = ExcitedParams::default();
        let s = strain_for_exey_splitting(&base, hz(2.0e9)).unwrap();
        assert!((exey_splitting(&base.with_strain(s, 0.0)) - hz(2.0e9)).abs() < 1e-3 * hz(1e6));
    }

    #[test]
    fn label_parse_round_trip() {
        for s in StateLabel::ALL {
            assert_eq!(s.name().parse::<StateLabel>().unwrap(), s);
        }
        assert!("B7".parse::<StateLabel>().is_err());
    }
}
