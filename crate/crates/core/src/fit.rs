//! Curve fitting for simulated traces: damped cosine by Levenberg–Marquardt with an
//! FFT starting guess, and straight lines through the origin.
//!
//! The damping envelope is exponential by default. A Gaussian envelope is the exact
//! shape for an ensemble with normally distributed oscillation frequencies.

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    /// `e^{−r t}`
    #[default]
    Exponential,
    /// `e^{−(r t)²/2}`
    Gaussian,
}

impl DecayShape {
    fn envelope(self, r: f64, t: f64) -> f64 {
        match self {
            Self::Exponential => (-r * t).exp(),
            Self::Gaussian => (-0.5 * (r * t).powi(2)).exp(),
        }
    }

    /// ∂ envelope / ∂r.
    fn envelope_dr(self, r: f64, t: f64) -> f64 {
        match self {
            Self::Exponential => -t * self.envelope(r, t),
            Self::Gaussian => -r * t * t * self.envelope(r, t),
        }
    }
}

/// `y(t) = A cos(ω t + φ) env(r, t) + C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DampedCosine {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub decay: f64,
    pub offset: f64,
    pub shape: DecayShape,
}

impl DampedCosine {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * t + self.phase).cos() * self.shape.envelope(self.decay, t) + self.offset
    }

    fn from_vec(v: &Vector5<f64>, shape: DecayShape) -> Self {
        Self { amplitude: v[0], frequency: v[1], phase: v[2], decay: v[3], offset: v[4], shape }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DampedCosineFit {
    pub model: DampedCosine,
    /// One-sigma uncertainties in the order (A, ω, φ, r, C).
    pub sigma: [f64; 5],
    pub r_squared: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn residuals(p: &Vector5<f64>, t: &[f64], y: &[f64], shape: DecayShape) -> DVector<f64> {
    let m = DampedCosine::from_vec(p, shape);
    DVector::from_iterator(t.len(), t.iter().zip(y).map(|(&ti, &yi)| yi - m.eval(ti)))
}

fn jacobian(p: &Vector5<f64>, t: &[f64], shape: DecayShape) -> DMatrix<f64> {
    let (a, w, phi, r) = (p[0], p[1], p[2], p[3]);
    let mut j = DMatrix::zeros(t.len(), 5);
    for (i, &ti) in t.iter().enumerate() {
        let e = shape.envelope(r, ti);
        let (s, c) = (w * ti + phi).sin_cos();
        j[(i, 0)] = c * e;
        j[(i, 1)] = -a * ti * s * e;
        j[(i, 2)] = -a * s * e;
        j[(i, 3)] = a * c * shape.envelope_dr(r, ti);
        j[(i, 4)] = 1.0;
    }
    j
}

fn ssr(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// Dominant nonzero angular frequency of a uniformly sampled trace.
pub fn fft_peak_frequency(t: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len();
    if n < 4 || t.len() != n {
        return Err(Error::Domain("need at least four uniformly spaced samples".into()));
    }
    let dt = (t[n - 1] - t[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Domain("sample times must increase".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let pad = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..pad).map(|k| Complex::new(if k < n { y[k] - mean } else { 0.0 }, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(pad).process(&mut buf);
    let (k, _) = buf[1..pad / 2]
        .iter()
        .enumerate()
        .map(|(i, z)| (i + 1, z.norm()))
        .fold((1, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(std::f64::consts::TAU * k as f64 / (pad as f64 * dt))
}

fn levenberg_marquardt(
    start: Vector5<f64>,
    t: &[f64],
    y: &[f64],
    shape: DecayShape,
    max_iter: usize,
) -> (Vector5<f64>, f64, bool, usize) {
    let mut p = start;
    let mut r = residuals(&p, t, y, shape);
    let mut cost = ssr(&r);
    let mut lambda = 1e-3;
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    for it in 0..max_iter {
        let j = jacobian(&p, t, shape);
        let jtj: Matrix5<f64> = Matrix5::from_iterator((j.transpose() * &j).iter().cloned());
        let jtr: Vector5<f64> = Vector5::from_iterator((j.transpose() * &r).iter().cloned());
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let rt = residuals(&trial, t, y, shape);
            let ct = ssr(&rt);
            if ct.is_finite() && ct <= cost {
                let rel = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                let small_step = step.iter().zip(p.iter()).all(|(s, v)| s.abs() <= 1e-10 * (v.abs() + 1e-300));
                if rel < 1e-14 || small_step || cost.sqrt() < 1e-14 * scale {
                    return (p, cost, true, it + 1);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a minimum to working precision.
            return (p, cost, true, it + 1);
        }
    }
    (p, cost, false, max_iter)
}

/// Fits an exponentially damped cosine to uniformly sampled data.
pub fn fit_damped_cosine(t: &[f64], y: &[f64]) -> Result<DampedCosineFit> {
    fit_damped_cosine_shaped(t, y, DecayShape::Exponential)
}

pub fn fit_damped_cosine_shaped(t: &[f64], y: &[f64], shape: DecayShape) -> Result<DampedCosineFit> {
    let n = y.len();
    if n < 8 || t.len() != n {
        return Err(Error::Domain(format!("damped-cosine fit needs at least 8 paired samples, got {n}")));
    }
    if y.iter().chain(t).any(|v| !v.is_finite()) {
        return Err(Error::Domain("fit data must be finite".into()));
    }
    let w0 = fft_peak_frequency(t, y)?;
    let span = t[n - 1] - t[0];
    let mean = y.iter().sum::<f64>() / n as f64;

    let mut best: Option<(Vector5<f64>, f64, bool, usize)> = None;
    for &r0 in &[0.0, 0.5 / span, 2.0 / span, 6.0 / span] {
        // Amplitude and phase from a linear least-squares fit at the trial frequency and decay.
        let mut basis = DMatrix::zeros(n, 3);
        for (i, &ti) in t.iter().enumerate() {
            let e = shape.envelope(r0, ti);
            basis[(i, 0)] = (w0 * ti).cos() * e;
            basis[(i, 1)] = (w0 * ti).sin() * e;
            basis[(i, 2)] = 1.0;
        }
        let coef = basis
            .clone()
            .svd(true, true)
            .solve(&DVector::from_column_slice(y), 1e-14)
            .unwrap_or_else(|_| DVector::from_vec(vec![0.0, 0.0, mean]));
        let amp = (coef[0] * coef[0] + coef[1] * coef[1]).sqrt();
        let phase = (-coef[1]).atan2(coef[0]);
        let start = Vector5::new(amp, w0, phase, r0, coef[2]);
        let out = levenberg_marquardt(start, t, y, shape, 500);
        if best.as_ref().map_or(true, |b| out.1 < b.1) {
            best = Some(out);
        }
    }
    let (mut p, cost, converged, iterations) = best.unwrap();
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[2] += std::f64::consts::PI;
    }
    if p[1] < 0.0 {
        p[1] = -p[1];
        p[2] = -p[2];
    }
    if shape == DecayShape::Gaussian {
        p[3] = p[3].abs();
    }
    p[2] = (p[2] + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;

    let j = jacobian(&p, t, shape);
    let dof = (n - 5).max(1) as f64;
    let cov = (j.transpose() * &j).try_inverse();
    let mut sigma = [f64::NAN; 5];
    if let Some(c) = cov {
        for k in 0..5 {
            sigma[k] = (c[(k, k)].max(0.0) * cost / dof).sqrt();
        }
    }
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - cost / sst } else { 1.0 };
    Ok(DampedCosineFit { model: DampedCosine::from_vec(&p, shape), sigma, r_squared, converged, iterations })
}

/// Least-squares line `y = s x` through the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OriginLine {
    pub slope: f64,
    pub slope_sigma: f64,
    /// `1 − SSR/SST` with the mean-centered total sum of squares.
    pub r_squared: f64,
}

pub fn fit_line_through_origin(x: &[f64], y: &[f64]) -> Result<OriginLine> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("line fit needs at least two paired points".into()));
    }
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("line fit needs a nonzero abscissa".into()));
    }
    let slope = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a).powi(2)).sum();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let slope_sigma = (ssr / (x.len() - 1) as f64 / sxx).sqrt();
    Ok(OriginLine { slope, slope_sigma, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, span: f64) -> Vec<f64> {
        (0..n).map(|k| span * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn recovers_a_clean_damped_cosine() {
        let truth = DampedCosine {
            amplitude: 0.8,
            frequency: 2.0e6,
            phase: 0.4,
            decay: 3.0e5,
            offset: 1.0,
            shape: DecayShape::Exponential,
        };
        let t = grid(200, 8e-6);
        let y: Vec<f64> = t.iter().map(|&s| truth.eval(s)).collect();
        let f = fit_damped_cosine(&t, &y).unwrap();
        assert!(f.converged);
        assert!((f.model.frequency - truth.frequency).abs() < 1e-6 * truth.frequency);
        assert!((f.model.decay - truth.decay).abs() < 1e-6 * truth.decay);
        assert!((f.model.offset - 1.0).abs() < 1e-8);
        assert!(f.r_squared > 0.999_999);
    }

    #[test]
    fn fft_guess_finds_the_peak() {
        let t = grid(256, 1.0);
        let y: Vec<f64> = t.iter().map(|&s| (std::f64::consts::TAU * 7.0 * s).cos()).collect();
        let w = fft_peak_frequency(&t, &y).unwrap();
        assert!((w / std::f64::consts::TAU - 7.0).abs() < 0.2);
    }

    #[test]
    fn origin_line_examples() {
        let l = fit_line_through_origin(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((l.slope - 2.0).abs() < 1e-15 && (l.r_squared - 1.0).abs() < 1e-15);
        // An offset line is not through the origin, and R² says so.
        let off = fit_line_through_origin(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]).unwrap();
        assert!(off.r_squared < 0.9);
        assert!(fit_line_through_origin(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(fit_damped_cosine(&[0.0, 1.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn recovers_random_parameters(
            amp in 0.1f64..1.0, cycles in 2.0f64..12.0, phase in -3.0f64..3.0, damping in 0.0f64..1.5,
        ) {
            let span = 1.0;
            let w = std::f64::consts::TAU * cycles / span;
            for shape in [DecayShape::Exponential, DecayShape::Gaussian] {
                let truth = DampedCosine { amplitude: amp, frequency: w, phase, decay: damping / span, offset: 0.5, shape };
                let t = grid(240, span);
                let y: Vec<f64> = t.iter().map(|&s| truth.eval(s)).collect();
                let f = fit_damped_cosine_shaped(&t, &y, shape).unwrap();
                prop_assert!((f.model.frequency - w).abs() < 1e-4 * w, "{:?}", f);
                prop_assert!((f.model.decay - truth.decay).abs() < 1e-4 * w);
            }
        }
    }
}
