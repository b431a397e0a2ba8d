//! Fits and statistical comparisons: correlation length, power-law exponent,
//! (even-)Poisson references, anomaly ratio, hold-dynamics spectrum and the
//! spectral gap of a fixed Hamiltonian.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::basis::{cyclic_shift, reflect, ConstrainedBasis};
use crate::error::{Error, Result};
use crate::geometry::Boundary;
use crate::hamiltonian::RydbergHamiltonian;
use crate::krylov::lanczos_lowest;

/// Values whose magnitude falls below this are dropped from log-space fits.
pub const LOG_FIT_FLOOR: f64 = 1e-12;

/// Weighted polynomial least squares `y = sum_k c_k x^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
}

impl PolyFit {
    pub fn stderr(&self, k: usize) -> f64 {
        self.covariance[k][k].max(0.0).sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fits a polynomial of the given degree.
///
/// With `sigma` supplied (all positive), weights are `1/sigma^2` and the
/// covariance is the absolute `(X^T W X)^-1`. Without it the fit is
/// unweighted and the covariance is scaled by the residual variance.
pub fn polyfit(x: &[f64], y: &[f64], sigma: Option<&[f64]>, degree: usize) -> Result<PolyFit> {
    let n = x.len();
    let p = degree + 1;
    if y.len() != n || sigma.is_some_and(|s| s.len() != n) {
        return Err(Error::DegenerateFit("x, y and sigma lengths differ".into()));
    }
    if n < p {
        return Err(Error::DegenerateFit(format!("{n} points cannot determine {p} parameters")));
    }
    if let Some(s) = sigma {
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateFit("standard errors must be positive".into()));
        }
    }
    let design = DMatrix::from_fn(n, p, |i, k| x[i].powi(k as i32));
    let w = DVector::from_fn(n, |i, _| sigma.map_or(1.0, |s| 1.0 / (s[i] * s[i])));
    let mut normal = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for i in 0..n {
        for a in 0..p {
            rhs[a] += w[i] * design[(i, a)] * y[i];
            for b in 0..p {
                normal[(a, b)] += w[i] * design[(i, a)] * design[(i, b)];
            }
        }
    }
    let inv = normal
        .clone()
        .try_inverse()
        .filter(|m: &DMatrix<f64>| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::DegenerateFit("singular normal equations (repeated x values?)".into()))?;
    let coeffs = &inv * rhs;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - (design.row(i) * &coeffs)[0]).collect();
    let residual_norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
    let cov = if sigma.is_some() {
        inv
    } else {
        let dof = n - p;
        let s2 = if dof > 0 { resid.iter().map(|r| r * r).sum::<f64>() / dof as f64 } else { 0.0 };
        inv * s2
    };
    Ok(PolyFit {
        coeffs: coeffs.iter().copied().collect(),
        covariance: (0..p).map(|a| (0..p).map(|b| cov[(a, b)]).collect()).collect(),
        residual_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<FitParam>,
    /// Covariance of the underlying linear fit parameters `(intercept, slope)`.
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    /// Inclusive range of the independent variable used.
    pub window: (f64, f64),
    pub n_points: usize,
    /// Abscissae inside the window that were dropped (non-positive values).
    pub excluded: Vec<f64>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |p| p.value)
    }

    pub fn stderr(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |p| p.stderr)
    }
}

/// One correlator value at displacement `l`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrPoint {
    pub l: f64,
    pub value: f64,
    /// Standard error of `value`; `None` for exact data.
    pub stderr: Option<f64>,
}

impl CorrPoint {
    pub fn exact(l: usize, value: f64) -> Self {
        Self { l: l as f64, value, stderr: None }
    }
}

/// Linear fit of `ln|y|` against `x` over the window, returning the raw fit,
/// the used window and excluded abscissae.
/// `show` maps `x` back to the caller's units for messages.
fn log_linear_fit(
    points: &[(f64, f64, Option<f64>)],
    window: (f64, f64),
    min_points: usize,
    show: fn(f64) -> f64,
) -> Result<(PolyFit, usize, Vec<f64>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut s = Vec::new();
    let mut excluded = Vec::new();
    let mut weighted = true;
    for &(xi, yi, si) in points.iter().filter(|p| p.0 >= window.0 && p.0 <= window.1) {
        if !(yi.abs() >= LOG_FIT_FLOOR) || !yi.is_finite() {
            excluded.push(xi);
            continue;
        }
        x.push(xi);
        y.push(yi.abs().ln());
        match si {
            Some(e) if e > 0.0 && e.is_finite() => s.push(e / yi.abs()),
            _ => weighted = false,
        }
    }
    if !excluded.is_empty() {
        log::warn!("log-space fit: dropped {} point(s) below {LOG_FIT_FLOOR:e}", excluded.len());
    }
    if x.len() < min_points {
        let dropped: Vec<f64> = excluded.iter().map(|&x| show(x)).collect();
        return Err(Error::DegenerateFit(format!(
            "{} usable point(s) in window [{}, {}], need {min_points}; non-positive values at {:?}",
            x.len(),
            show(window.0),
            show(window.1),
            dropped
        )));
    }
    let fit = polyfit(&x, &y, weighted.then_some(s.as_slice()), 1)?;
    Ok((fit, x.len(), excluded))
}

/// Exponential-decay fit `|C(l)| = A exp(-l / xi)` by weighted linear
/// regression of `ln|C|` on `l`. Returns parameters `xi` and `amplitude`.
pub fn fit_correlation_length(corr: &[CorrPoint], window: (f64, f64)) -> Result<FitResult> {
    let pts: Vec<_> = corr.iter().map(|c| (c.l, c.value, c.stderr)).collect();
    let (fit, n_points, excluded) = log_linear_fit(&pts, window, 3, std::convert::identity)?;
    let slope = fit.coeffs[1];
    if !(slope < 0.0) {
        return Err(Error::DegenerateFit(format!("correlations do not decay over the window (slope {slope})")));
    }
    let xi = -1.0 / slope;
    let amplitude = fit.coeffs[0].exp();
    Ok(FitResult {
        params: vec![
            FitParam { name: "xi".into(), value: xi, stderr: fit.stderr(1) / (slope * slope) },
            FitParam { name: "amplitude".into(), value: amplitude, stderr: amplitude * fit.stderr(0) },
        ],
        covariance: fit.covariance.clone(),
        residual_norm: fit.residual_norm,
        window,
        n_points,
        excluded,
    })
}

/// One `(Gamma, value, stderr)` point of a rate sweep.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub gamma: f64,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Power law `value = A * Gamma^(-mu)` from a log-log linear fit.
/// Returns parameters `mu` and `amplitude`.
pub fn fit_power_law(points: &[RatePoint], window: (f64, f64)) -> Result<FitResult> {
    if points.iter().any(|p| !(p.gamma > 0.0)) {
        return Err(Error::DegenerateFit("rates must be positive".into()));
    }
    let pts: Vec<_> = points.iter().map(|p| (p.gamma.ln(), p.value, p.stderr)).collect();
    let log_window = (window.0.ln(), window.1.ln());
    let (fit, n_points, excluded) = log_linear_fit(&pts, log_window, 3, f64::exp)?;
    let amplitude = fit.coeffs[0].exp();
    Ok(FitResult {
        params: vec![
            FitParam { name: "mu".into(), value: -fit.coeffs[1], stderr: fit.stderr(1) },
            FitParam { name: "amplitude".into(), value: amplitude, stderr: amplitude * fit.stderr(0) },
        ],
        covariance: fit.covariance.clone(),
        residual_norm: fit.residual_norm,
        window,
        n_points,
        excluded: excluded.into_iter().map(f64::exp).collect(),
    })
}

/// Middle third of `[min, max]` of the rates, in log space.
pub fn default_power_law_window(gammas: &[f64]) -> Option<(f64, f64)> {
    let lo = gammas.iter().cloned().filter(|g| *g > 0.0).fold(f64::INFINITY, f64::min);
    let hi = gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return None;
    }
    let (a, b) = (lo.ln(), hi.ln());
    let third = (b - a) / 3.0;
    // widen by a hair so grid points on the edges are kept
    let pad = 1e-9 * (b - a);
    Some(((a + third - pad).exp(), (a + 2.0 * third + pad).exp()))
}

fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("Poisson rate must be positive, got {lambda}")));
    }
    Ok(())
}

pub fn poisson_pmf(lambda: f64, k: u32) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((k as f64 * lambda.ln() - lambda - ln_factorial(k)).exp())
}

/// Poisson restricted to even `k`, renormalised by `cosh(lambda)`.
pub fn even_poisson_pmf(lambda: f64, k: u32) -> Result<f64> {
    check_lambda(lambda)?;
    if k % 2 == 1 {
        return Ok(0.0);
    }
    // ln cosh(l) = l + ln((1 + e^{-2l}) / 2)
    let ln_cosh = lambda + (0.5 * (1.0 + (-2.0 * lambda).exp())).ln();
    Ok((k as f64 * lambda.ln() - ln_factorial(k) - ln_cosh).exp())
}

/// Reference pmf over `k = 0..=k_max`.
pub fn pmf_table(lambda: f64, k_max: u32, even: bool) -> Result<Vec<f64>> {
    (0..=k_max)
        .map(|k| if even { even_poisson_pmf(lambda, k) } else { poisson_pmf(lambda, k) })
        .collect()
}

/// Total-variation distance `1/2 sum_k |p_k - q_k|`; the shorter vector is zero-padded.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    0.5 * (0..n)
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Distance between an empirical distribution and the even-Poisson law with
/// the same mean. The reference extends far enough to carry all but a
/// negligible tail.
pub fn distance_to_even_poisson(pmf: &[f64], mean: f64) -> Result<f64> {
    let k_max = (pmf.len() as f64).max(mean + 20.0 * mean.sqrt() + 50.0) as u32;
    Ok(total_variation(pmf, &pmf_table(mean, k_max, true)?))
}

/// `var / mean`; above one flags super-Poissonian defect statistics.
pub fn anomaly_ratio(mean: f64, var: f64) -> Result<f64> {
    if !(mean > 0.0) {
        return Err(Error::InvalidParameter(format!("anomaly ratio needs a positive mean, got {mean}")));
    }
    Ok(var / mean)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detrend {
    Mean,
    /// Centred moving average over this many samples.
    RunningMean(usize),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    #[default]
    Rectangular,
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// One-sided frequency axis, MHz.
    pub frequencies: Vec<f64>,
    /// One-sided amplitudes, normalised so that `sum m_k^2 = sum x_i^2`
    /// (rectangular taper).
    pub magnitudes: Vec<f64>,
    /// Bin spacing `1 / (N dt)`, MHz.
    pub resolution: f64,
    pub peak_frequency: f64,
    pub peak_magnitude: f64,
    /// Spectral gap frequency, filled in by callers that know it.
    pub gap_frequency: Option<f64>,
}

impl SpectrumResult {
    /// Spectral weight below the gap: summed power of the non-DC bins with
    /// `f < nu - resolution`, relative to the power of the peak bin.
    pub fn sub_gap_weight(&self, nu: f64) -> f64 {
        let cut = nu - self.resolution;
        let below: f64 = self
            .frequencies
            .iter()
            .zip(&self.magnitudes)
            .skip(1)
            .filter(|(f, _)| **f < cut)
            .map(|(_, m)| m * m)
            .sum();
        let peak = self.peak_magnitude * self.peak_magnitude;
        if peak > 0.0 {
            below / peak
        } else {
            0.0
        }
    }
}

/// Removes the trend from `values` as requested.
pub fn detrend(values: &[f64], how: Detrend) -> Vec<f64> {
    match how {
        Detrend::Mean => {
            let m = values.iter().sum::<f64>() / values.len() as f64;
            values.iter().map(|v| v - m).collect()
        }
        Detrend::RunningMean(w) => {
            let avg = running_mean(values, w.max(1));
            values.iter().zip(avg).map(|(v, a)| v - a).collect()
        }
    }
}

/// Centred moving average; the window shrinks symmetrically at the ends.
pub fn running_mean(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let half = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + values[i];
    }
    (0..n)
        .map(|i| {
            let reach = half.min(i).min(n - 1 - i);
            let (a, b) = (i - reach, i + reach + 1);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

/// Relative spread `(max - min) / |mean|` of the full-window moving averages
/// of `values` over `window` samples.
pub fn running_average_drift(values: &[f64], window: usize) -> Result<f64> {
    if window == 0 || window > values.len() {
        return Err(Error::InvalidParameter(format!("window {window} does not fit {} samples", values.len())));
    }
    let averages: Vec<f64> = values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return Err(Error::InvalidParameter("drift relative to a zero mean".into()));
    }
    let hi = averages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = averages.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((hi - lo) / mean.abs())
}

/// Fourier spectrum of a uniformly sampled series (`t` in us, so frequencies in MHz).
pub fn hold_spectrum(series: &[(f64, f64)], how: Detrend, taper: Taper) -> Result<SpectrumResult> {
    let n = series.len();
    if n < 16 {
        return Err(Error::InvalidParameter(format!("spectrum needs at least 16 samples, got {n}")));
    }
    let dt = (series[n - 1].0 - series[0].0) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("sample times must increase".into()));
    }
    for (i, w) in series.windows(2).enumerate() {
        if ((w[1].0 - w[0].0) - dt).abs() > 1e-6 * dt {
            return Err(Error::InvalidParameter(format!("non-uniform sampling at index {i}")));
        }
    }
    let values: Vec<f64> = series.iter().map(|p| p.1).collect();
    let x = detrend(&values, how);
    let mut buf: Vec<num_complex::Complex64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = match taper {
                Taper::Rectangular => 1.0,
                Taper::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos(),
            };
            num_complex::Complex64::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let half = n / 2;
    let scale = 1.0 / (n as f64).sqrt();
    let magnitudes: Vec<f64> = (0..=half)
        .map(|k| {
            let edge = k == 0 || (n % 2 == 0 && k == half);
            let fold = if edge { 1.0 } else { 2f64.sqrt() };
            buf[k].norm() * scale * fold
        })
        .collect();
    let resolution = 1.0 / (n as f64 * dt);
    let frequencies: Vec<f64> = (0..=half).map(|k| k as f64 * resolution).collect();
    let (peak_k, peak_magnitude) = magnitudes
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (k, &m)| if m > best.1 { (k, m) } else { best });
    Ok(SpectrumResult {
        peak_frequency: frequencies[peak_k],
        peak_magnitude: peak_magnitude.max(0.0),
        frequencies,
        magnitudes,
        resolution,
        gap_frequency: None,
    })
}

/// Symmetry sector used by [`spectral_gap`].
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSector {
    /// Whole basis.
    Full,
    /// States invariant under every lattice symmetry of the chain (all
    /// translations and reflections on rings; the reflection on open
    /// chains). This is the sector reached from the vacuum.
    #[default]
    Symmetric,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    /// Lowest eigenvalue, rad/us.
    pub e0: f64,
    pub e1: f64,
    /// `e1 - e0`, rad/us.
    pub gap: f64,
    /// `gap / 2pi`, MHz.
    pub nu: f64,
    pub iterations: usize,
}

/// Orbit of every basis state under the chain's lattice symmetry group.
#[derive(Clone, Debug)]
pub struct SymmetryOrbits {
    orbit_of: Vec<u32>,
    sizes: Vec<u32>,
}

impl SymmetryOrbits {
    pub fn new(basis: &ConstrainedBasis) -> Self {
        let n = basis.n_sites();
        let images = |s: u64| -> Vec<u64> {
            let mut out = Vec::with_capacity(2 * n);
            match basis.boundary() {
                Boundary::Periodic => {
                    let mut x = s;
                    for _ in 0..n {
                        out.push(x);
                        out.push(reflect(x, n));
                        x = cyclic_shift(x, n);
                    }
                }
                Boundary::Open => {
                    out.push(s);
                    out.push(reflect(s, n));
                }
            }
            out
        };
        let mut ids: HashMap<u64, u32> = HashMap::new();
        let mut sizes = Vec::new();
        let orbit_of = basis
            .states()
            .iter()
            .map(|&s| {
                let rep = images(s).into_iter().min().expect("non-empty orbit");
                let next = ids.len() as u32;
                let id = *ids.entry(rep).or_insert(next);
                if id as usize == sizes.len() {
                    sizes.push(0);
                }
                sizes[id as usize] += 1;
                id
            })
            .collect();
        Self { orbit_of, sizes }
    }

    pub fn n_orbits(&self) -> usize {
        self.sizes.len()
    }

    pub fn orbit_of(&self, index: usize) -> usize {
        self.orbit_of[index] as usize
    }

    /// Orthogonal projection onto symmetric vectors: averages over each orbit.
    pub fn project(&self, v: &mut [f64]) {
        let mut sums = vec![0.0; self.sizes.len()];
        for (x, &o) in v.iter().zip(&self.orbit_of) {
            sums[o as usize] += x;
        }
        for (x, &o) in v.iter_mut().zip(&self.orbit_of) {
            *x = sums[o as usize] / self.sizes[o as usize] as f64;
        }
    }
}

/// Two lowest eigenvalues of `H(omega, delta)`.
///
/// With `Omega = 0` the Hamiltonian is diagonal and the answer is read off the
/// sorted diagonal. Otherwise a Lanczos iteration is used; in the symmetric
/// sector it starts from the uniform vector and is projected every step.
pub fn spectral_gap(h: &RydbergHamiltonian, omega: f64, delta: f64, sector: GapSector) -> Result<GapResult> {
    let dim = h.dim();
    if dim < 2 {
        return Err(Error::InvalidParameter("spectral gap needs a basis of dimension >= 2".into()));
    }
    let orbits = match sector {
        GapSector::Symmetric => {
            let orbits = SymmetryOrbits::new(h.basis());
            check_symmetric(h, &orbits, delta)?;
            if orbits.n_orbits() < 2 {
                return Err(Error::InvalidParameter("symmetric sector is one-dimensional".into()));
            }
            Some(orbits)
        }
        GapSector::Full => None,
    };

    if omega == 0.0 {
        let mut energies: Vec<f64> = match &orbits {
            None => (0..dim).map(|i| h.diag_energy(i, delta)).collect(),
            Some(o) => {
                let mut per_orbit = vec![f64::NAN; o.n_orbits()];
                for i in 0..dim {
                    per_orbit[o.orbit_of(i)] = h.diag_energy(i, delta);
                }
                per_orbit
            }
        };
        energies.sort_by(f64::total_cmp);
        let gap = energies[1] - energies[0];
        return Ok(GapResult { e0: energies[0], e1: energies[1], gap, nu: gap / (2.0 * PI), iterations: 0 });
    }

    let start: Vec<f64> = match &orbits {
        Some(_) => vec![1.0; dim],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()
        }
    };
    let projector = orbits.as_ref().map(|o| move |v: &mut [f64]| o.project(v));
    let res = lanczos_lowest(
        |x, y| h.apply_fixed(omega, delta, x, y),
        &start,
        2,
        1e-11,
        600,
        projector.as_ref().map(|p| p as &dyn Fn(&mut [f64])),
    )?;
    if res.values.len() < 2 {
        return Err(Error::Eigensolver { iterations: res.iterations, residual: 0.0 });
    }
    let gap = res.values[1] - res.values[0];
    Ok(GapResult { e0: res.values[0], e1: res.values[1], gap, nu: gap / (2.0 * PI), iterations: res.iterations })
}

fn check_symmetric(h: &RydbergHamiltonian, orbits: &SymmetryOrbits, delta: f64) -> Result<()> {
    let mut reference = vec![f64::NAN; orbits.n_orbits()];
    for i in 0..h.dim() {
        let e = h.diag_energy(i, delta);
        let r = &mut reference[orbits.orbit_of(i)];
        if r.is_nan() {
            *r = e;
        } else if (e - *r).abs() > 1e-9 * e.abs().max(1.0) {
            return Err(Error::InvalidParameter(
                "geometry breaks the chain symmetry; use the full sector".into(),
            ));
        }
    }
    Ok(())
}
