//! Lindblad master-equation engine.
//!
//! `dρ/dt = −i[H, ρ] + Σ_k γ_k (L_k ρ L_k† − ½{L_k† L_k, ρ})`
//!
//! States are vectorized column-major (`vec(ρ)[i + n·j] = ρ_ij`), so that
//! `vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)`. The nine-level NV model gives an 81-dimensional
//! superoperator, which is always kept dense. Time-independent segments are
//! propagated exactly with the matrix exponential; time-dependent generators and
//! anything that needs error control go through an adaptive Dormand–Prince 5(4)
//! integrator.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::{Error, Result};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Tolerances on the density-matrix invariants.
pub const TRACE_TOL: f64 = 1e-9;
pub const HERMITIAN_TOL: f64 = 1e-12;
pub const POSITIVITY_TOL: f64 = 1e-9;
/// Largest trace correction the renormalization guard may apply in one step.
pub const GUARD_LIMIT: f64 = 1e-8;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: CMatrix,
}

impl DensityMatrix {
    /// Validates the trace, Hermiticity and positivity invariants.
    pub fn new(rho: CMatrix) -> Result<Self> {
        let d = Self::from_matrix_unchecked(rho)?;
        d.check()?;
        Ok(d)
    }

    pub fn from_matrix_unchecked(rho: CMatrix) -> Result<Self> {
        if !rho.is_square() {
            return Err(Error::Dimension(format!("density matrix must be square, got {}×{}", rho.nrows(), rho.ncols())));
        }
        Ok(Self { rho })
    }

    pub fn pure(psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 {
            return Err(Error::Domain("cannot build a pure state from the zero vector".into()));
        }
        let v = psi / C64::new(norm, 0.0);
        Ok(Self { rho: &v * v.adjoint() })
    }

    pub fn basis(n: usize, k: usize) -> Self {
        let mut rho = CMatrix::zeros(n, n);
        rho[(k, k)] = C64::new(1.0, 0.0);
        Self { rho }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self { rho: CMatrix::identity(n, n) / C64::new(n as f64, 0.0) }
    }

    /// Diagonal state with the given populations (must sum to one).
    pub fn diagonal(populations: &[f64]) -> Result<Self> {
        let n = populations.len();
        let mut rho = CMatrix::zeros(n, n);
        for (k, &p) in populations.iter().enumerate() {
            rho[(k, k)] = C64::new(p, 0.0);
        }
        Self::new(rho)
    }

    /// Convex combination `Σ w_i ρ_i`.
    pub fn mixture(parts: &[(f64, &DensityMatrix)]) -> Result<Self> {
        let n = parts.first().map(|(_, r)| r.dim()).ok_or_else(|| Error::Domain("empty mixture".into()))?;
        let mut rho = CMatrix::zeros(n, n);
        for (w, r) in parts {
            if r.dim() != n {
                return Err(Error::Dimension("mixture components differ in dimension".into()));
            }
            rho += &r.rho * C64::new(*w, 0.0);
        }
        Self::new(rho)
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn into_matrix(self) -> CMatrix {
        self.rho
    }

    pub fn population(&self, k: usize) -> f64 {
        self.rho[(k, k)].re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.population(k)).collect()
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (&self.rho - self.rho.adjoint()).iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()) * C64::new(0.5, 0.0);
        let eig = nalgebra::SymmetricEigen::new(h);
        eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn check(&self) -> Result<()> {
        let tr = self.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::Invariant(format!("trace {tr} differs from 1")));
        }
        let h = self.hermiticity_defect();
        if h > HERMITIAN_TOL {
            return Err(Error::Invariant(format!("Hermiticity defect {h:.3e}")));
        }
        let m = self.min_eigenvalue();
        if m < -POSITIVITY_TOL {
            return Err(Error::Invariant(format!("negative eigenvalue {m:.3e}")));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> CVector {
        CVector::from_column_slice(self.rho.as_slice())
    }

    pub fn from_vector(v: &CVector) -> Result<Self> {
        let n = (v.len() as f64).sqrt().round() as usize;
        if n * n != v.len() {
            return Err(Error::Dimension(format!("vector of length {} is not a vectorized square matrix", v.len())));
        }
        Ok(Self { rho: CMatrix::from_column_slice(n, n, v.as_slice()) })
    }

    /// Restores exact Hermiticity, unit trace and positivity. Fails if the trace is
    /// off, or an eigenvalue is negative, by more than [`GUARD_LIMIT`].
    pub fn renormalized(self) -> Result<Self> {
        self.guarded(GUARD_LIMIT)
    }

    /// [`renormalized`](Self::renormalized) with an explicit correction budget, used by
    /// the integrator to allow [`GUARD_LIMIT`] per step taken since the last guard.
    pub fn guarded(mut self, limit: f64) -> Result<Self> {
        let tr = self.trace();
        if (tr.re - 1.0).abs() > limit || tr.im.abs() > limit {
            return Err(Error::Invariant(format!("renormalization guard: trace drifted to {tr}")));
        }
        let h = (&self.rho + self.rho.adjoint()) * C64::new(0.5 / tr.re, 0.0);
        let eig = nalgebra::SymmetricEigen::new(h.clone());
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -limit {
            return Err(Error::Invariant(format!("renormalization guard: eigenvalue {min:.3e}")));
        }
        self.rho = if min < 0.0 {
            let clipped = eig.eigenvalues.map(|l| C64::new(l.max(0.0), 0.0));
            let v = &eig.eigenvectors;
            let r = v * CMatrix::from_diagonal(&clipped) * v.adjoint();
            let t = r.trace().re;
            (&r + r.adjoint()) * C64::new(0.5 / t, 0.0)
        } else {
            h
        };
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseChannel {
    pub operator: CMatrix,
    /// Rate γ (1/s).
    pub rate: f64,
    pub label: String,
}

impl CollapseChannel {
    pub fn new(operator: CMatrix, rate: f64, label: impl Into<String>) -> Result<Self> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(Error::Domain(format!("collapse rate must be non-negative, got {rate}")));
        }
        if !operator.is_square() {
            return Err(Error::Dimension("jump operator must be square".into()));
        }
        Ok(Self { operator, rate, label: label.into() })
    }

    /// Jump `|to⟩⟨from|` at `rate`.
    pub fn decay(n: usize, from: usize, to: usize, rate: f64) -> Result<Self> {
        let mut op = CMatrix::zeros(n, n);
        op[(to, from)] = C64::new(1.0, 0.0);
        Self::new(op, rate, format!("decay {from}->{to}"))
    }

    /// Pure dephasing of level `k` (`L = |k⟩⟨k|`).
    pub fn dephasing(n: usize, k: usize, rate: f64) -> Result<Self> {
        let mut op = CMatrix::zeros(n, n);
        op[(k, k)] = C64::new(1.0, 0.0);
        Self::new(op, rate, format!("dephasing {k}"))
    }
}

fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Superoperator of `ρ ↦ −i[H, ρ]`.
pub fn commutator_superoperator(h: &CMatrix) -> CMatrix {
    let n = h.nrows();
    let id = CMatrix::identity(n, n);
    (kron(&id, h) - kron(&h.transpose(), &id)) * C64::new(0.0, -1.0)
}

#[derive(Debug, Clone)]
pub struct Liouvillian {
    dim: usize,
    hamiltonian: CMatrix,
    channels: Vec<CollapseChannel>,
    matrix: CMatrix,
}

impl Liouvillian {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.hamiltonian
    }

    pub fn channels(&self) -> &[CollapseChannel] {
        &self.channels
    }

    /// Dense `n² × n²` superoperator.
    pub fn superoperator(&self) -> &CMatrix {
        &self.matrix
    }

    /// Matrix-free evaluation of `L(ρ)`.
    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let i = C64::new(0.0, 1.0);
        let mut out = (&self.hamiltonian * rho - rho * &self.hamiltonian) * (-i);
        for ch in &self.channels {
            if ch.rate == 0.0 {
                continue;
            }
            let l = &ch.operator;
            let ld = l.adjoint();
            let ldl = &ld * l;
            out += (l * rho * &ld - (&ldl * rho + rho * &ldl) * C64::new(0.5, 0.0)) * C64::new(ch.rate, 0.0);
        }
        out
    }

    pub fn apply_vec(&self, v: &CVector) -> CVector {
        &self.matrix * v
    }

    /// Largest entry magnitude, a cheap scale for step-size and tolerance choices.
    pub fn scale(&self) -> f64 {
        self.matrix.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }
}

/// Builds the Lindblad generator. `H` must be Hermitian and all dimensions consistent.
pub fn liouvillian(h: &CMatrix, channels: &[CollapseChannel]) -> Result<Liouvillian> {
    if !h.is_square() {
        return Err(Error::Dimension(format!("Hamiltonian must be square, got {}×{}", h.nrows(), h.ncols())));
    }
    let n = h.nrows();
    let scale = h.iter().fold(1.0_f64, |m, z| m.max(z.norm()));
    let defect = (h - h.adjoint()).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    if defect > 1e-12 * scale {
        return Err(Error::Config(format!("Hamiltonian is not Hermitian (defect {defect:.3e})")));
    }
    for ch in channels {
        if ch.operator.nrows() != n {
            return Err(Error::Dimension(format!(
                "channel `{}` acts on dimension {}, Hamiltonian on {}",
                ch.label,
                ch.operator.nrows(),
                n
            )));
        }
    }
    let id = CMatrix::identity(n, n);
    let mut m = commutator_superoperator(h);
    for ch in channels {
        if ch.rate == 0.0 {
            continue;
        }
        let l = &ch.operator;
        let ldl = l.adjoint() * l;
        let term = kron(&l.conjugate(), l)
            - kron(&id, &ldl) * C64::new(0.5, 0.0)
            - kron(&ldl.transpose(), &id) * C64::new(0.5, 0.0);
        m += term * C64::new(ch.rate, 0.0);
    }
    Ok(Liouvillian { dim: n, hamiltonian: h.clone(), channels: channels.to_vec(), matrix: m })
}

/// Pulse envelope applied to the modulated part of a generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Envelope {
    Rectangular,
    /// sin² rise and fall of the given duration inside a pulse of length `duration`.
    SmoothEdges { rise: f64, duration: f64 },
    /// `cos(ω t + φ)`, for lab-frame reference integrations.
    Cosine { frequency: f64, phase: f64 },
}

impl Envelope {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Envelope::Rectangular => 1.0,
            Envelope::SmoothEdges { rise, duration } => {
                if rise <= 0.0 {
                    return 1.0;
                }
                let edge = |x: f64| (std::f64::consts::FRAC_PI_2 * (x / rise).clamp(0.0, 1.0)).sin().powi(2);
                edge(t).min(edge(duration - t))
            }
            Envelope::Cosine { frequency, phase } => (frequency * t + phase).cos(),
        }
    }
}

/// Generator `L(t) = L_static + s(t) · L_drive` for the adaptive integrator.
#[derive(Debug, Clone)]
pub struct Generator {
    pub base: Liouvillian,
    pub modulated: Option<(CMatrix, Envelope)>,
}

impl Generator {
    pub fn constant(l: Liouvillian) -> Self {
        Self { base: l, modulated: None }
    }

    /// `drive_hamiltonian` is switched by `envelope`; `base` holds everything else.
    pub fn with_envelope(base: Liouvillian, drive_hamiltonian: &CMatrix, envelope: Envelope) -> Result<Self> {
        if drive_hamiltonian.nrows() != base.dim() {
            return Err(Error::Dimension("drive Hamiltonian dimension differs from the generator".into()));
        }
        Ok(Self { base, modulated: Some((commutator_superoperator(drive_hamiltonian), envelope)) })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    fn derivative(&self, t: f64, y: &CVector) -> CVector {
        let mut d = &self.base.matrix * y;
        if let Some((m, env)) = &self.modulated {
            let s = env.value(t);
            if s != 0.0 {
                d += (m * y) * C64::new(s, 0.0);
            }
        }
        d
    }

    fn scale(&self) -> f64 {
        let mut s = self.base.scale();
        if let Some((m, _)) = &self.modulated {
            s += m.iter().fold(0.0_f64, |a, z| a.max(z.norm()));
        }
        s
    }
}

impl From<Liouvillian> for Generator {
    fn from(l: Liouvillian) -> Self {
        Self::constant(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    /// Local error tolerance (absolute and relative).
    pub tol: f64,
    /// Number of evenly spaced emitted states, including both endpoints.
    pub samples: usize,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { tol: 1e-8, samples: 101, max_steps: 5_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn population(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.population(k)).collect()
    }

    /// Checks trace, Hermiticity and positivity of every emitted state.
    pub fn check(&self) -> Result<()> {
        for (t, s) in self.times.iter().zip(&self.states) {
            s.check().map_err(|e| Error::Invariant(format!("at t = {t:.6e} s: {e}")))?;
        }
        Ok(())
    }

    /// CSV with `time_s`, one `pop_<label>` column per basis state, then `abs_<a>_<b>`
    /// for each requested coherence, in that order.
    pub fn to_csv(&self, labels: &[String], coherences: &[(usize, usize)]) -> String {
        let mut out = String::from("time_s");
        for l in labels {
            let _ = write!(out, ",pop_{l}");
        }
        for &(a, b) in coherences {
            let _ = write!(out, ",abs_{}_{}", labels[a], labels[b]);
        }
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:.12e}");
            for k in 0..labels.len() {
                let _ = write!(out, ",{:.12e}", s.population(k));
            }
            for &(a, b) in coherences {
                let _ = write!(out, ",{:.12e}", s.matrix()[(a, b)].norm());
            }
            out.push('\n');
        }
        out
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

fn axpy(y: &CVector, terms: &[(f64, &CVector)], h: f64) -> CVector {
    let mut out = y.clone();
    for (c, k) in terms {
        if *c != 0.0 {
            out.axpy(C64::new(h * c, 0.0), k, C64::new(1.0, 0.0));
        }
    }
    out
}

/// Adaptive-step integration of `ρ0` under `generator` for `duration` seconds.
pub fn evolve(
    rho0: &DensityMatrix,
    generator: &Generator,
    duration: f64,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    if rho0.dim() != generator.dim() {
        return Err(Error::Dimension(format!(
            "state has dimension {}, generator {}",
            rho0.dim(),
            generator.dim()
        )));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::Domain(format!("duration must be non-negative, got {duration}")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    if duration == 0.0 {
        return Ok(Trajectory { times: vec![0.0], states: vec![rho0.clone()] });
    }
    let samples = opts.samples.max(2);
    let targets: Vec<f64> = (0..samples).map(|k| duration * k as f64 / (samples - 1) as f64).collect();

    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    let mut y = rho0.to_vector();
    let mut t = 0.0;
    let mut h = (0.01 / generator.scale().max(1e-300)).min(duration);
    let mut k1 = generator.derivative(t, &y);
    let mut steps = 0usize;
    let mut guarded_at = 0usize;
    let mut next = 1;

    while next < samples {
        let target = targets[next];
        let hs = h.min(target - t);
        let last = hs >= target - t;
        if hs <= 1e-14 * duration.max(t.abs()) {
            return Err(Error::Stiffness { t, h: hs });
        }
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Stiffness { t, h: hs });
        }
        let k2 = generator.derivative(t + C2 * hs, &axpy(&y, &[(A21, &k1)], hs));
        let k3 = generator.derivative(t + C3 * hs, &axpy(&y, &[(A31, &k1), (A32, &k2)], hs));
        let k4 = generator.derivative(t + C4 * hs, &axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], hs));
        let k5 = generator.derivative(
            t + C5 * hs,
            &axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], hs),
        );
        let k6 = generator.derivative(
            t + hs,
            &axpy(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], hs),
        );
        let y_new = axpy(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], hs);
        let k7 = generator.derivative(t + hs, &y_new);
        let err_vec = axpy(
            &CVector::zeros(y.len()),
            &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
            hs,
        );
        let mut acc = 0.0;
        for i in 0..y.len() {
            let sc = opts.tol * (1.0 + y[i].norm().max(y_new[i].norm()));
            acc += (err_vec[i].norm() / sc).powi(2);
        }
        let err = (acc / y.len() as f64).sqrt();
        if err <= 1.0 {
            t = if last { target } else { t + hs };
            y = y_new;
            k1 = k7;
            if last {
                let state = DensityMatrix::from_vector(&y)?.guarded(GUARD_LIMIT * (steps - guarded_at) as f64)?;
                guarded_at = steps;
                y = state.to_vector();
                k1 = generator.derivative(t, &y);
                times.push(t);
                states.push(state);
                next += 1;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !last || fac < 1.0 {
                h = hs * fac;
            }
        } else {
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    Ok(Trajectory { times, states })
}

/// Exact propagator `exp(L dt)` of a time-independent generator.
pub fn propagator(l: &Liouvillian, dt: f64) -> CMatrix {
    (l.superoperator() * C64::new(dt, 0.0)).exp()
}

/// Exact piecewise-constant evolution sampled at `samples` evenly spaced times.
pub fn evolve_exact(rho0: &DensityMatrix, l: &Liouvillian, duration: f64, samples: usize) -> Result<Trajectory> {
    if rho0.dim() != l.dim() {
        return Err(Error::Dimension("state and generator dimensions differ".into()));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::Domain(format!("duration must be non-negative, got {duration}")));
    }
    if duration == 0.0 {
        return Ok(Trajectory { times: vec![0.0], states: vec![rho0.clone()] });
    }
    let samples = samples.max(2);
    let dt = duration / (samples - 1) as f64;
    let u = propagator(l, dt);
    let mut y = rho0.to_vector();
    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    for k in 1..samples {
        y = &u * &y;
        let s = DensityMatrix::from_vector(&y)?.renormalized()?;
        y = s.to_vector();
        times.push(dt * k as f64);
        states.push(s);
    }
    Ok(Trajectory { times, states })
}

/// Final state after `duration` under a time-independent generator.
pub fn propagate(rho0: &DensityMatrix, l: &Liouvillian, duration: f64) -> Result<DensityMatrix> {
    if duration == 0.0 {
        return Ok(rho0.clone());
    }
    let y = propagator(l, duration) * rho0.to_vector();
    DensityMatrix::from_vector(&y)?.renormalized()
}

/// `∫₀^T exp(L t) dt`, from the exponential of the augmented block matrix `[[L, I], [0, 0]]`.
pub fn integrated_propagator(l: &Liouvillian, duration: f64) -> CMatrix {
    let m = l.superoperator().nrows();
    let mut big = CMatrix::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&(l.superoperator() * C64::new(duration, 0.0)));
    for i in 0..m {
        big[(i, m + i)] = C64::new(duration, 0.0);
    }
    big.exp().view((0, m), (m, m)).into_owned()
}

/// Row functional `f` such that `f · vec(ρ0)` is the time-integrated occupation
/// `∫₀^T Σ_k ρ_kk(t) dt` of the `emitting` levels.
pub fn occupation_functional(l: &Liouvillian, emitting: &[usize], duration: f64) -> CVector {
    let n = l.dim();
    let integral = integrated_propagator(l, duration);
    let mut f = CVector::zeros(n * n);
    for &k in emitting {
        let row = k + n * k;
        for j in 0..n * n {
            f[j] += integral[(row, j)];
        }
    }
    f
}

/// `∫₀^T Σ_k ρ_kk(t) dt` for one initial state, from the exponential of `L` bordered by
/// a single accumulator row (cheaper than the full functional when only one state is needed).
pub fn integrated_occupation(l: &Liouvillian, rho0: &DensityMatrix, emitting: &[usize], duration: f64) -> Result<f64> {
    let n = l.dim();
    if rho0.dim() != n {
        return Err(Error::Dimension("state and generator dimensions differ".into()));
    }
    let m = n * n;
    let mut big = CMatrix::zeros(m + 1, m + 1);
    big.view_mut((0, 0), (m, m)).copy_from(&(l.superoperator() * C64::new(duration, 0.0)));
    for &k in emitting {
        big[(m, k + n * k)] = C64::new(duration, 0.0);
    }
    let mut v = CVector::zeros(m + 1);
    v.rows_mut(0, m).copy_from(&rho0.to_vector());
    Ok((big.exp() * v)[m].re)
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub rho: DensityMatrix,
    /// The null space of the generator has dimension > 1; `rho` is then the
    /// long-time limit of the maximally mixed state.
    pub degenerate: bool,
    /// `max |L(ρ)|` relative to the generator scale.
    pub residual: f64,
}

/// Null-space vector of a time-independent Liouvillian with unit trace.
pub fn steady_state(l: &Liouvillian) -> Result<SteadyState> {
    let n = l.dim();
    let m = n * n;
    let scale = l.scale().max(1e-300);
    let mut a = l.superoperator() / C64::new(scale, 0.0);
    // Trace constraint replaces the (0,0) population equation, which is redundant.
    for j in 0..m {
        a[(0, j)] = zero();
    }
    for k in 0..n {
        a[(0, k + n * k)] = C64::new(1.0, 0.0);
    }
    let mut b = CVector::zeros(m);
    b[0] = C64::new(1.0, 0.0);
    let lu = a.lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..m).map(|k| u[(k, k)].norm()).collect();
    let pmax = pivots.iter().cloned().fold(0.0, f64::max);
    let pmin = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    let degenerate = !(pmin > 1e-11 * pmax);

    let vec = if degenerate {
        long_time_limit(l, &DensityMatrix::maximally_mixed(n))?
    } else {
        lu.solve(&b).ok_or_else(|| Error::Numerical {
            message: "steady-state linear system is singular".into(),
            residual: f64::NAN,
        })?
    };
    let rho = DensityMatrix::from_vector(&vec)?;
    let tr = rho.trace();
    let rho = DensityMatrix::from_matrix_unchecked(
        (rho.matrix() + rho.matrix().adjoint()) * C64::new(0.5 / tr.re, 0.0),
    )?;
    let residual = l.apply_vec(&rho.to_vector()).iter().fold(0.0_f64, |mx, z| mx.max(z.norm())) / scale;
    if residual > 1e-8 {
        return Err(Error::Numerical { message: "steady state did not converge".into(), residual });
    }
    Ok(SteadyState { rho, degenerate, residual })
}

fn long_time_limit(l: &Liouvillian, rho0: &DensityMatrix) -> Result<CVector> {
    let x0 = rho0.to_vector();
    let mut u = propagator(l, 1.0 / l.scale().max(1e-300));
    let mut x = &u * &x0;
    for _ in 0..200 {
        u = &u * &u;
        let nx = &u * &x0;
        let diff = (&nx - &x).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        x = nx;
        if diff < 1e-13 {
            return Ok(x);
        }
    }
    Err(Error::Numerical { message: "long-time limit did not converge".into(), residual: f64::NAN })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluorescence {
    /// Expected photon number.
    pub photons: f64,
    /// Set when the window has zero length.
    pub empty_window: bool,
}

/// `efficiency · ∫ γ Σ_e P_e(t) dt` over `window`, by trapezoidal quadrature on the
/// trajectory samples (linear interpolation at the window edges).
pub fn fluorescence(
    traj: &Trajectory,
    emitting: &[usize],
    gamma: f64,
    window: (f64, f64),
    efficiency: f64,
) -> Result<Fluorescence> {
    let (t0, t1) = window;
    let start = *traj.times.first().unwrap_or(&0.0);
    let end = *traj.times.last().unwrap_or(&0.0);
    if t0 > t1 || t0 < start - 1e-15 || t1 > end + 1e-15 * end.abs().max(1.0) {
        return Err(Error::Domain(format!(
            "window [{t0:.3e}, {t1:.3e}] s lies outside the trajectory span [{start:.3e}, {end:.3e}] s"
        )));
    }
    if t1 == t0 {
        log::warn!("empty fluorescence window at t = {t0:.3e} s");
        return Ok(Fluorescence { photons: 0.0, empty_window: true });
    }
    let p: Vec<f64> = traj.states.iter().map(|s| emitting.iter().map(|&k| s.population(k)).sum()).collect();
    let interp = |t: f64| -> f64 {
        let i = traj.times.partition_point(|&x| x <= t).clamp(1, traj.times.len() - 1);
        let (ta, tb) = (traj.times[i - 1], traj.times[i]);
        let w = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
        p[i - 1] + w * (p[i] - p[i - 1])
    };
    let mut knots = vec![(t0, interp(t0))];
    for (k, &t) in traj.times.iter().enumerate() {
        if t > t0 && t < t1 {
            knots.push((t, p[k]));
        }
    }
    knots.push((t1, interp(t1)));
    let integral: f64 = knots.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(Fluorescence { photons: efficiency * gamma * integral, empty_window: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn two_level_decay(gamma: f64) -> Liouvillian {
        let h = CMatrix::zeros(2, 2);
        liouvillian(&h, &[CollapseChannel::decay(2, 1, 0, gamma).unwrap()]).unwrap()
    }

    fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (&a + a.adjoint()) * c(0.5)
    }

    fn random_state(n: usize, seed: u64) -> DensityMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let rho = &a * a.adjoint();
        let tr = rho.trace();
        DensityMatrix::new(rho / tr).unwrap()
    }

    #[test]
    fn amplitude_damping_matches_closed_form() {
        let gamma = 1.0e7;
        let l = two_level_decay(gamma);
        let rho0 = DensityMatrix::basis(2, 1);
        let traj = evolve(&rho0, &l.clone().into(), 5.0 / gamma, &EvolveOptions { tol: 1e-10, ..Default::default() })
            .unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.population(1) - (-gamma * t).exp()).abs() < 1e-7);
        }
        assert!((traj.final_state().population(1) - (-5.0f64).exp()).abs() < 1e-6);
        traj.check().unwrap();
    }

    #[test]
    fn unitary_rabi_oscillation() {
        let omega = 2.0e7;
        let mut h = CMatrix::zeros(2, 2);
        h[(0, 1)] = c(0.5 * omega);
        h[(1, 0)] = c(0.5 * omega);
        let l = liouvillian(&h, &[]).unwrap();
        let traj = evolve(&DensityMatrix::basis(2, 0), &l.into(), 3.0e-6, &EvolveOptions { tol: 1e-11, ..Default::default() }).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.population(1) - (0.5 * omega * t).sin().powi(2)).abs() < 1e-6);
            assert!((s.trace().re - 1.0).abs() < 1e-9);
            assert!((s.purity() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_duration_returns_initial_state() {
        let l = two_level_decay(1.0);
        let rho0 = DensityMatrix::basis(2, 1);
        let traj = evolve(&rho0, &l.into(), 0.0, &EvolveOptions::default()).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.states[0], rho0);
    }

    #[test]
    fn adaptive_and_exact_routes_agree() {
        let h = random_hermitian(4, 3) * c(1e7);
        let ch = [
            CollapseChannel::decay(4, 3, 0, 2e6).unwrap(),
            CollapseChannel::decay(4, 2, 1, 5e5).unwrap(),
            CollapseChannel::dephasing(4, 1, 1e6).unwrap(),
        ];
        let l = liouvillian(&h, &ch).unwrap();
        let rho0 = random_state(4, 9);
        let a = evolve(&rho0, &l.clone().into(), 1e-6, &EvolveOptions { tol: 1e-11, samples: 11, ..Default::default() })
            .unwrap();
        let b = evolve_exact(&rho0, &l, 1e-6, 11).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x.matrix() - y.matrix()).iter().all(|z| z.norm() < 1e-8));
        }
    }

    #[test]
    fn matrix_free_and_dense_agree() {
        let h = random_hermitian(3, 11);
        let ch = [CollapseChannel::new(random_hermitian(3, 12), 0.7, "x").unwrap()];
        let l = liouvillian(&h, &ch).unwrap();
        let rho = random_state(3, 13);
        let dense = DensityMatrix::from_vector(&l.apply_vec(&rho.to_vector())).unwrap();
        let free = l.apply(rho.matrix());
        assert!((dense.matrix() - free).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_a_configuration_error() {
        let h = CMatrix::zeros(3, 3);
        let ch = CollapseChannel::decay(2, 1, 0, 1.0).unwrap();
        assert!(matches!(liouvillian(&h, &[ch]), Err(Error::Dimension(_))));
        assert!(CollapseChannel::decay(2, 1, 0, -1.0).is_err());
    }

    #[test]
    fn steady_state_of_pure_decay_is_ground() {
        let ss = steady_state(&two_level_decay(3.0)).unwrap();
        assert!((ss.rho.population(0) - 1.0).abs() < 1e-12);
        assert!(!ss.degenerate);
    }

    #[test]
    fn driven_two_level_steady_state_matches_bloch_solution() {
        // Independent closed form: ρ_ee = Ω² / (γ² + 2Ω²) for H = (Ω/2)σₓ, decay γ.
        for &(omega, gamma) in &[(1.0, 1.0), (3.0e7, 1.0e7), (2.0e6, 9.0e7)] {
            let mut h = CMatrix::zeros(2, 2);
            h[(0, 1)] = c(0.5 * omega);
            h[(1, 0)] = c(0.5 * omega);
            let l = liouvillian(&h, &[CollapseChannel::decay(2, 1, 0, gamma).unwrap()]).unwrap();
            let ss = steady_state(&l).unwrap();
            let expect = omega * omega / (gamma * gamma + 2.0 * omega * omega);
            assert!((ss.rho.population(1) - expect).abs() < 1e-10, "{} vs {}", ss.rho.population(1), expect);
        }
    }

    #[test]
    fn degenerate_null_space_is_flagged() {
        // Two decoupled decaying pairs: two stationary states.
        let h = CMatrix::zeros(4, 4);
        let ch = [CollapseChannel::decay(4, 1, 0, 1.0).unwrap(), CollapseChannel::decay(4, 3, 2, 1.0).unwrap()];
        let ss = steady_state(&liouvillian(&h, &ch).unwrap()).unwrap();
        assert!(ss.degenerate);
        assert!((ss.rho.population(0) - 0.5).abs() < 1e-9);
        assert!((ss.rho.population(2) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fluorescence_definitions() {
        let gamma = 2.0e7;
        let flat = Trajectory {
            times: vec![0.0, 1e-6, 2e-6],
            states: vec![DensityMatrix::diagonal(&[0.7, 0.3]).unwrap(); 3],
        };
        let f = fluorescence(&flat, &[1], gamma, (0.5e-6, 2e-6), 0.1).unwrap();
        assert!((f.photons - 0.1 * gamma * 0.3 * 1.5e-6).abs() < 1e-9);
        let dark = Trajectory { times: vec![0.0, 1.0], states: vec![DensityMatrix::basis(2, 0); 2] };
        assert_eq!(fluorescence(&dark, &[1], gamma, (0.0, 1.0), 1.0).unwrap().photons, 0.0);
        let empty = fluorescence(&dark, &[1], gamma, (0.5, 0.5), 1.0).unwrap();
        assert!(empty.empty_window && empty.photons == 0.0);
        assert!(fluorescence(&dark, &[1], gamma, (0.0, 2.0), 1.0).is_err());
    }

    #[test]
    fn occupation_functional_matches_quadrature() {
        let gamma = 1.0e7;
        let l = two_level_decay(gamma);
        let f = occupation_functional(&l, &[1], 3.0 / gamma);
        let v = f.dot(&DensityMatrix::basis(2, 1).to_vector()).re;
        assert!((v - (1.0 - (-3.0f64).exp()) / gamma).abs() < 1e-15);
    }

    #[test]
    fn single_state_occupation_matches_functional() {
        let h = random_hermitian(3, 5) * c(2e7);
        let l = liouvillian(&h, &[CollapseChannel::decay(3, 2, 0, 4e6).unwrap()]).unwrap();
        let rho0 = random_state(3, 6);
        let f = occupation_functional(&l, &[1, 2], 7e-7).dot(&rho0.to_vector()).re;
        let g = integrated_occupation(&l, &rho0, &[1, 2], 7e-7).unwrap();
        assert!((f - g).abs() < 1e-12 * f.abs().max(1e-7), "{f} {g}");
    }

    #[test]
    fn convergence_order_of_integrator() {
        let h = random_hermitian(3, 21) * c(1e7);
        let l = liouvillian(&h, &[CollapseChannel::decay(3, 2, 0, 3e6).unwrap()]).unwrap();
        let rho0 = random_state(3, 22);
        let reference = evolve_exact(&rho0, &l, 2e-6, 2).unwrap();
        let err = |tol: f64| {
            let t = evolve(&rho0, &l.clone().into(), 2e-6, &EvolveOptions { tol, samples: 2, ..Default::default() })
                .unwrap();
            (t.final_state().matrix() - reference.final_state().matrix()).iter().fold(0.0_f64, |m, z| m.max(z.norm()))
        };
        let coarse = err(1e-5);
        let fine = err(1e-9);
        // Error tracks the requested tolerance: four decades of tol buy at least two of error.
        assert!(fine < coarse * 1e-2, "{coarse:e} -> {fine:e}");
        assert!(fine < 1e-7);
    }

    #[test]
    fn stiffness_error_reports_diagnostic() {
        let l = two_level_decay(1e9);
        let r = evolve(&DensityMatrix::basis(2, 1), &l.into(), 1.0, &EvolveOptions { tol: 1e-8, samples: 2, max_steps: 100 });
        assert!(matches!(r, Err(Error::Stiffness { .. })));
    }

    #[test]
    fn smooth_envelope_shapes_the_drive() {
        let env = Envelope::SmoothEdges { rise: 1.0, duration: 10.0 };
        assert_eq!(env.value(0.0), 0.0);
        assert!((env.value(0.5) - 0.5).abs() < 1e-12);
        assert_eq!(env.value(5.0), 1.0);
        assert!(env.value(10.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generator_is_trace_free(seed in 0u64..10_000) {
            let h = random_hermitian(4, seed);
            let ch = [CollapseChannel::new(random_hermitian(4, seed + 1), 0.4, "a").unwrap(),
                      CollapseChannel::decay(4, 3, 1, 1.3).unwrap()];
            let l = liouvillian(&h, &ch).unwrap();
            let d = l.apply(&random_hermitian(4, seed + 2));
            prop_assert!(d.trace().norm() < 1e-10);
        }

        #[test]
        fn evolution_is_linear(seed in 0u64..10_000, alpha in 0.0f64..1.0) {
            let h = random_hermitian(3, seed) * c(1e6);
            let l = liouvillian(&h, &[CollapseChannel::decay(3, 1, 0, 4e5).unwrap()]).unwrap();
            let r1 = random_state(3, seed + 5);
            let r2 = random_state(3, seed + 6);
            let mix = DensityMatrix::mixture(&[(alpha, &r1), (1.0 - alpha, &r2)]).unwrap();
            let opts = EvolveOptions { tol: 1e-10, samples: 2, ..Default::default() };
            let g: Generator = l.into();
            let a = evolve(&mix, &g, 2e-6, &opts).unwrap();
            let b1 = evolve(&r1, &g, 2e-6, &opts).unwrap();
            let b2 = evolve(&r2, &g, 2e-6, &opts).unwrap();
            let combo = b1.final_state().matrix() * c(alpha) + b2.final_state().matrix() * c(1.0 - alpha);
            prop_assert!((a.final_state().matrix() - combo).iter().all(|z| z.norm() < 1e-8));
            a.check().unwrap();
        }
    }
}
