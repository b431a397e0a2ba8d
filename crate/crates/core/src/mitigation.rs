//! Readout-error model and two-step zero-noise extrapolation of domain-wall
//! moments, with a confusion-matrix-inversion baseline.
//!
//! A bit reads `1 -> 0` with probability `eps10` and `0 -> 1` with
//! probability `eps01`, independently per atom. Noise is amplified on
//! measured bitstrings by composing an extra channel so that the total
//! rates are exactly `(alpha eps01, beta eps10)`. The observable is then
//! extrapolated linearly in `eps01` for every `beta`, and the intermediate
//! values extrapolated in `eps10` with the requested order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::polyfit;
use crate::error::{Error, Result};
use crate::geometry::Boundary;
use crate::observables::{domain_wall_count, estimate_moments, BitstringSample};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    pub eps10: f64,
    pub eps01: f64,
    #[serde(default)]
    pub d_eps10: f64,
    #[serde(default)]
    pub d_eps01: f64,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        Self { eps10: 0.061, eps01: 0.009, d_eps10: 0.004, d_eps01: 0.002 }
    }
}

impl ReadoutModel {
    pub fn new(eps10: f64, eps01: f64, d_eps10: f64, d_eps01: f64) -> Result<Self> {
        let m = Self { eps10, eps01, d_eps10, d_eps01 };
        m.validate()?;
        Ok(m)
    }

    pub fn noiseless() -> Self {
        Self { eps10: 0.0, eps01: 0.0, d_eps10: 0.0, d_eps01: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("eps10", self.eps10), ("eps01", self.eps01)] {
            if !(0.0..0.5).contains(&p) {
                return Err(Error::InvalidModel(format!("{name} = {p} outside [0, 0.5)")));
            }
        }
        for (name, d) in [("d_eps10", self.d_eps10), ("d_eps01", self.d_eps01)] {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidModel(format!("{name} = {d} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Reads a calibration file `{eps10, d_eps10, eps01, d_eps01}`.
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }

    /// Single-bit confusion matrix `M[measured][true]`.
    pub fn confusion(&self) -> [[f64; 2]; 2] {
        [[1.0 - self.eps01, self.eps10], [self.eps01, 1.0 - self.eps10]]
    }
}

/// Flips every bit of every shot: `1 -> 0` with probability `eps10`, `0 -> 1`
/// with probability `eps01`.
pub fn apply_readout_noise(sample: &BitstringSample, eps01: f64, eps10: f64, seed: u64) -> Result<BitstringSample> {
    apply_noise_with(sample, eps01, eps10, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn apply_noise_with(sample: &BitstringSample, eps01: f64, eps10: f64, rng: &mut ChaCha8Rng) -> Result<BitstringSample> {
    for (name, p) in [("eps01", eps01), ("eps10", eps10)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidModel(format!("flip probability {name} = {p} outside [0, 1]")));
        }
    }
    if eps01 == 0.0 && eps10 == 0.0 {
        return Ok(sample.clone());
    }
    let n = sample.n_sites;
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for &(mask, count) in &sample.shots {
        for _ in 0..count {
            let mut out = mask;
            for j in 0..n {
                let one = (mask >> j) & 1 == 1;
                let p = if one { eps10 } else { eps01 };
                if p > 0.0 && rng.gen::<f64>() < p {
                    out ^= 1u64 << j;
                }
            }
            *counts.entry(out).or_default() += 1;
        }
    }
    Ok(BitstringSample::from_counts(n, counts))
}

/// Extra flip probabilities taking the calibrated channel to `(alpha eps01, beta eps10)`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplificationChannel {
    pub q01: f64,
    pub q10: f64,
    /// The exact solution left `[0, 1]` and was clamped.
    pub clamped: bool,
}

/// Solves `M_extra M_true = M_target` for the extra channel.
pub fn amplification_channel(model: &ReadoutModel, alpha: f64, beta: f64) -> Result<AmplificationChannel> {
    if !(alpha >= 1.0) || !(beta >= 1.0) {
        return Err(Error::InvalidGrid(format!("multipliers must be >= 1, got alpha {alpha}, beta {beta}")));
    }
    let (e01, e10) = (model.eps01, model.eps10);
    let det = 1.0 - e01 - e10;
    if det.abs() < 1e-12 {
        return Err(Error::InvalidModel("confusion matrix is singular".into()));
    }
    let q01 = e01 * ((alpha - 1.0) + e10 * (beta - alpha)) / det;
    let q10 = e10 * ((beta - 1.0) + e01 * (alpha - beta)) / det;
    let clamp = |q: f64| q.clamp(0.0, 1.0);
    let clamped = clamp(q01) != q01 || clamp(q10) != q10;
    if clamped {
        log::warn!("amplification to ({alpha}, {beta}) is not a valid channel; flip rates clamped");
    }
    Ok(AmplificationChannel { q01: clamp(q01), q10: clamp(q10), clamped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZneGrid {
    /// Multipliers of `eps01`.
    pub alphas: Vec<f64>,
    /// Multipliers of `eps10`.
    pub betas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ZneGrid {
    fn default() -> Self {
        Self { alphas: vec![1.0, 2.0, 3.0], betas: vec![1.0, 1.5, 2.0], repeats: 4, seed: 0 }
    }
}

impl ZneGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("alphas", &self.alphas), ("betas", &self.betas)] {
            if list.iter().any(|&m| !(m >= 1.0) || !m.is_finite()) {
                return Err(Error::InvalidGrid(format!("{name} must all be >= 1: {list:?}")));
            }
            if !list.contains(&1.0) {
                return Err(Error::InvalidGrid(format!("{name} must include 1: {list:?}")));
            }
            let mut sorted = list.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::InvalidGrid(format!("{name} has repeated values: {list:?}")));
            }
        }
        if self.repeats == 0 {
            return Err(Error::InvalidGrid("repeats must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallObservable {
    WallMean,
    WallVar,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOrder {
    Linear,
    Quadratic,
}

impl FitOrder {
    pub fn degree(self) -> usize {
        match self {
            FitOrder::Linear => 1,
            FitOrder::Quadratic => 2,
        }
    }
}

/// Observable measured at one amplified noise level, averaged over repeats.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub alpha: f64,
    pub beta: f64,
    /// Total rates after amplification.
    pub eps01: f64,
    pub eps10: f64,
    pub channel: AmplificationChannel,
    pub value: f64,
    pub stderr: f64,
}

/// Step-one result: the observable extrapolated to `eps01 = 0` at fixed `beta`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntermediateValue {
    pub beta: f64,
    pub eps10: f64,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZneResult {
    pub observable: WallObservable,
    pub order: FitOrder,
    pub value: f64,
    pub stat_err: f64,
    pub sys_err: f64,
    pub grid: Vec<GridValue>,
    pub intermediate: Vec<IntermediateValue>,
    /// Fitted `eps10` polynomial, constant term first.
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub clamped: bool,
}

impl ZneResult {
    pub fn combined_err(&self) -> f64 {
        self.stat_err.hypot(self.sys_err)
    }
}

fn observable_of(sample: &BitstringSample, boundary: Boundary, obs: WallObservable) -> Result<(f64, f64)> {
    let m = estimate_moments(sample, boundary)?;
    Ok(match obs {
        WallObservable::WallMean => (m.mean, m.se_mean),
        WallObservable::WallVar => (m.var, m.se_var),
    })
}

/// Measures both wall moments at every grid point; `[beta][alpha]` ordering.
fn measure_grid(
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
) -> Result<Vec<Vec<[GridValue; 2]>>> {
    model.validate()?;
    grid.validate()?;
    let (na, nb) = (grid.alphas.len(), grid.betas.len());
    let jobs: Vec<(usize, usize, usize)> = (0..grid.repeats)
        .flat_map(|r| (0..nb).flat_map(move |b| (0..na).map(move |a| (r, b, a))))
        .collect();
    let measured: Vec<Result<[(f64, f64); 2]>> = jobs
        .par_iter()
        .map(|&(r, b, a)| {
            let ch = amplification_channel(model, grid.alphas[a], grid.betas[b])?;
            let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
            rng.set_stream(((r * nb + b) * na + a) as u64 + 1);
            let noisy = apply_noise_with(sample, ch.q01, ch.q10, &mut rng)?;
            Ok([
                observable_of(&noisy, boundary, WallObservable::WallMean)?,
                observable_of(&noisy, boundary, WallObservable::WallVar)?,
            ])
        })
        .collect();
    let mut out = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut row = Vec::with_capacity(na);
        for a in 0..na {
            let (alpha, beta) = (grid.alphas[a], grid.betas[b]);
            let channel = amplification_channel(model, alpha, beta)?;
            let mut acc = [(0.0, 0.0); 2];
            for r in 0..grid.repeats {
                let m = measured[(r * nb + b) * na + a].as_ref().map_err(|e| Error::Sampling(e.to_string()))?;
                for k in 0..2 {
                    acc[k].0 += m[k].0;
                    acc[k].1 += m[k].1;
                }
            }
            let reps = grid.repeats as f64;
            let point = |k: usize| GridValue {
                alpha,
                beta,
                eps01: alpha * model.eps01,
                eps10: beta * model.eps10,
                channel,
                value: acc[k].0 / reps,
                stderr: acc[k].1 / reps,
            };
            row.push([point(0), point(1)]);
        }
        out.push(row);
    }
    Ok(out)
}

/// Weighted fit `y(x)` extrapolated to `x = 0`; returns `(value, stderr, fit)`.
fn extrapolate(x: &[f64], y: &[f64], se: &[f64], degree: usize) -> Result<(f64, f64, crate::analysis::PolyFit)> {
    let weighted = se.iter().all(|&s| s > 0.0 && s.is_finite());
    let fit = polyfit(x, y, weighted.then_some(se), degree)
        .map_err(|e| Error::InvalidGrid(format!("extrapolation failed: {e}")))?;
    Ok((fit.coeffs[0], fit.stderr(0), fit))
}

/// Two-step extrapolation of already measured grid values (`[beta][alpha]`).
///
/// Standard errors of zero everywhere request an unweighted fit, which is
/// how exact expectation values are extrapolated.
pub fn extrapolate_grid(
    values: &[Vec<GridValue>],
    model: &ReadoutModel,
    observable: WallObservable,
    order: FitOrder,
) -> Result<ZneResult> {
    let mut intermediate = Vec::with_capacity(values.len());
    for row in values {
        let beta = row[0].beta;
        let at_one = row.iter().find(|g| g.alpha == 1.0).unwrap_or(&row[0]);
        let (value, stderr) = if model.eps01 == 0.0 || row.len() == 1 {
            (at_one.value, at_one.stderr)
        } else {
            let x: Vec<f64> = row.iter().map(|g| g.eps01).collect();
            let y: Vec<f64> = row.iter().map(|g| g.value).collect();
            let s: Vec<f64> = row.iter().map(|g| g.stderr).collect();
            let (v, e, _) = extrapolate(&x, &y, &s, 1)?;
            (v, e)
        };
        intermediate.push(IntermediateValue { beta, eps10: beta * model.eps10, value, stderr });
    }
    let (value, stat_err, coefficients, residual_norm) = if model.eps10 == 0.0 || intermediate.len() == 1 {
        let one = intermediate.iter().find(|i| i.beta == 1.0).unwrap_or(&intermediate[0]);
        (one.value, one.stderr, vec![one.value], 0.0)
    } else {
        if intermediate.len() <= order.degree() {
            return Err(Error::InvalidGrid(format!(
                "{} beta values cannot support a degree-{} extrapolation",
                intermediate.len(),
                order.degree()
            )));
        }
        let x: Vec<f64> = intermediate.iter().map(|i| i.eps10).collect();
        let y: Vec<f64> = intermediate.iter().map(|i| i.value).collect();
        let s: Vec<f64> = intermediate.iter().map(|i| i.stderr).collect();
        let (v, e, fit) = extrapolate(&x, &y, &s, order.degree())?;
        (v, e, fit.coeffs, fit.residual_norm)
    };
    let grid: Vec<GridValue> = values.iter().flatten().copied().collect();
    Ok(ZneResult {
        observable,
        order,
        value,
        stat_err,
        sys_err: 0.0,
        clamped: grid.iter().any(|g| g.channel.clamped),
        grid,
        intermediate,
        coefficients,
        residual_norm,
    })
}

/// ZNE of both wall moments from one set of resampled grids, so linear and
/// quadratic extrapolations can be compared on identical data.
pub fn zne_grid_values(
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
) -> Result<Vec<Vec<GridValue>>> {
    let k = match observable {
        WallObservable::WallMean => 0,
        WallObservable::WallVar => 1,
    };
    Ok(measure_grid(sample, boundary, model, grid)?
        .into_iter()
        .map(|row| row.into_iter().map(|pair| pair[k]).collect())
        .collect())
}

/// Mitigated wall mean or variance from measured bitstrings.
pub fn zne_mitigate(
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
    order: FitOrder,
) -> Result<ZneResult> {
    let values = zne_grid_values(sample, boundary, model, grid, observable)?;
    extrapolate_grid(&values, model, observable, order)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystematicVariants {
    /// `eps10 +- d` and `eps01 +- d`, one parameter at a time.
    #[default]
    OneAtATime,
    /// The four sign combinations of both shifts.
    Corners,
}

fn variant_models(model: &ReadoutModel, variants: SystematicVariants) -> Vec<ReadoutModel> {
    let shifted = |s10: f64, s01: f64| ReadoutModel {
        eps10: (model.eps10 + s10 * model.d_eps10).max(0.0),
        eps01: (model.eps01 + s01 * model.d_eps01).max(0.0),
        ..*model
    };
    match variants {
        SystematicVariants::OneAtATime => vec![shifted(1.0, 0.0), shifted(-1.0, 0.0), shifted(0.0, 1.0), shifted(0.0, -1.0)],
        SystematicVariants::Corners => vec![shifted(1.0, 1.0), shifted(1.0, -1.0), shifted(-1.0, 1.0), shifted(-1.0, -1.0)],
    }
}

/// Largest deviation of the ZNE result when the assumed calibration is
/// shifted by its uncertainty.
pub fn systematic_error(
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
    order: FitOrder,
    variants: SystematicVariants,
) -> Result<f64> {
    let base = zne_mitigate(sample, boundary, model, grid, observable, order)?.value;
    systematic_from_base(base, sample, boundary, model, grid, observable, order, variants)
}

#[allow(clippy::too_many_arguments)]
fn systematic_from_base(
    base: f64,
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
    order: FitOrder,
    variants: SystematicVariants,
) -> Result<f64> {
    if model.d_eps10 == 0.0 && model.d_eps01 == 0.0 {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for m in variant_models(model, variants) {
        let v = zne_mitigate(sample, boundary, &m, grid, observable, order)?.value;
        worst = worst.max((v - base).abs());
    }
    Ok(worst)
}

/// ZNE with the systematic error filled in.
pub fn zne_with_systematics(
    sample: &BitstringSample,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
    order: FitOrder,
    variants: SystematicVariants,
) -> Result<ZneResult> {
    let mut res = zne_mitigate(sample, boundary, model, grid, observable, order)?;
    res.sys_err = systematic_from_base(res.value, sample, boundary, model, grid, observable, order, variants)?;
    Ok(res)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectedMean {
    pub value: f64,
    pub stat_err: f64,
}

/// Wall mean from two-site marginals corrected by the inverse of the
/// single-bit confusion matrix on both sites.
pub fn confusion_inverse_mean(sample: &BitstringSample, boundary: Boundary, model: &ReadoutModel) -> Result<CorrectedMean> {
    model.validate()?;
    let det = 1.0 - model.eps01 - model.eps10;
    if det.abs() < 1e-12 {
        return Err(Error::InvalidModel("confusion matrix is singular".into()));
    }
    let m = model.confusion();
    // inv[true][measured]
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    // weight of a measured pair (a, b) towards the true wall indicator [s == t]
    let mut w = [[0.0; 2]; 2];
    for (a, row) in w.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = (0..2).map(|s| inv[s][a] * inv[s][b]).sum();
        }
    }
    let n = sample.n_sites;
    let bonds: Vec<(usize, usize)> = match boundary {
        Boundary::Periodic => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        Boundary::Open => (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
    };
    let total = sample.total_shots as f64;
    if total < 2.0 {
        return Err(Error::Sampling("need at least two shots".into()));
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &(mask, count) in &sample.shots {
        let v: f64 = bonds
            .iter()
            .map(|&(i, j)| w[((mask >> i) & 1) as usize][((mask >> j) & 1) as usize])
            .sum();
        s1 += v * count as f64;
        s2 += v * v * count as f64;
    }
    let mean = s1 / total;
    let var = (s2 - total * mean * mean) / (total - 1.0);
    Ok(CorrectedMean { value: mean, stat_err: (var.max(0.0) / total).sqrt() })
}

/// Exact distribution of measured bitstrings when `probs` (indexed by
/// bitmask over all `2^n` strings) is read through the noisy channel.
pub fn noisy_distribution(probs: &[f64], n_sites: usize, eps01: f64, eps10: f64) -> Vec<f64> {
    let mut p = probs.to_vec();
    // the channel factorises over sites
    for j in 0..n_sites {
        let bit = 1usize << j;
        for s in 0..p.len() {
            if s & bit == 0 {
                let (p0, p1) = (p[s], p[s | bit]);
                p[s] = (1.0 - eps01) * p0 + eps10 * p1;
                p[s | bit] = eps01 * p0 + (1.0 - eps10) * p1;
            }
        }
    }
    p
}

/// Exact wall mean and variance of a distribution over all `2^n` strings.
pub fn wall_moments_of_distribution(probs: &[f64], n_sites: usize, boundary: Boundary) -> (f64, f64) {
    let (mut m1, mut m2) = (0.0, 0.0);
    for (s, &p) in probs.iter().enumerate() {
        let d = domain_wall_count(s as u64, n_sites, boundary) as f64;
        m1 += p * d;
        m2 += p * d * d;
    }
    (m1, m2 - m1 * m1)
}

/// Runs the extrapolation on exact noisy expectation values instead of samples.
pub fn zne_expectation(
    probs: &[f64],
    n_sites: usize,
    boundary: Boundary,
    model: &ReadoutModel,
    grid: &ZneGrid,
    observable: WallObservable,
    order: FitOrder,
) -> Result<ZneResult> {
    model.validate()?;
    grid.validate()?;
    let mut values = Vec::new();
    for &beta in &grid.betas {
        let mut row = Vec::new();
        for &alpha in &grid.alphas {
            let channel = amplification_channel(model, alpha, beta)?;
            let noisy = noisy_distribution(probs, n_sites, alpha * model.eps01, beta * model.eps10);
            let (mean, var) = wall_moments_of_distribution(&noisy, n_sites, boundary);
            row.push(GridValue {
                alpha,
                beta,
                eps01: alpha * model.eps01,
                eps10: beta * model.eps10,
                channel,
                value: if observable == WallObservable::WallMean { mean } else { var },
                stderr: 0.0,
            });
        }
        values.push(row);
    }
    extrapolate_grid(&values, model, observable, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn binomial_ok(k: f64, n: f64, p: f64) -> bool {
        (k - n * p).abs() <= 5.0 * (n * p * (1.0 - p)).sqrt()
    }

    fn ones(n_sites: usize, shots: u64) -> BitstringSample {
        let mut c = BTreeMap::new();
        c.insert((1u64 << n_sites) - 1, shots);
        BitstringSample::from_counts(n_sites, c)
    }

    fn count_ones(s: &BitstringSample) -> f64 {
        s.shots.iter().map(|(m, c)| (m.count_ones() as u64 * c) as f64).sum()
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = ones(5, 100);
        assert_eq!(apply_readout_noise(&s, 0.0, 0.0, 3).unwrap(), s);
    }

    #[test]
    fn ones_decay_at_eps10() {
        let s = ones(10, 100_000);
        let noisy = apply_readout_noise(&s, 0.009, 0.061, 11).unwrap();
        assert!(binomial_ok(count_ones(&noisy), 1e6, 0.939));
        assert_eq!(noisy, apply_readout_noise(&s, 0.009, 0.061, 11).unwrap());
        assert_ne!(noisy, apply_readout_noise(&s, 0.009, 0.061, 12).unwrap());
    }

    #[test]
    fn single_site_expectation_map() {
        // site marginal p = 0.3
        let mut c = BTreeMap::new();
        c.insert(1u64, 300_000);
        c.insert(0u64, 700_000);
        let s = BitstringSample::from_counts(1, c);
        let (e01, e10) = (0.02, 0.07);
        let noisy = apply_readout_noise(&s, e01, e10, 5).unwrap();
        let p_meas = (1.0 - e10) * 0.3 + e01 * 0.7;
        assert!(binomial_ok(count_ones(&noisy), 1e6, p_meas));
    }

    #[test]
    fn amplification_algebra() {
        let m = ReadoutModel::default();
        let ch = amplification_channel(&m, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(ch.q01, 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(ch.q10, 0.0, epsilon = 1e-16);
        let only10 = ReadoutModel { eps01: 0.0, ..m };
        let ch = amplification_channel(&only10, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(ch.q10, 0.061 / 0.939, epsilon = 1e-15);
        assert_eq!(ch.q01, 0.0);
        // composing the channels by matrix product reproduces the target rates
        for (a, b) in [(2.0, 1.0), (3.0, 2.0), (1.0, 1.5)] {
            let ch = amplification_channel(&m, a, b).unwrap();
            let extra = [[1.0 - ch.q01, ch.q10], [ch.q01, 1.0 - ch.q10]];
            let t = m.confusion();
            let c01 = extra[1][0] * t[0][0] + extra[1][1] * t[1][0];
            let c10 = extra[0][0] * t[0][1] + extra[0][1] * t[1][1];
            assert_abs_diff_eq!(c01, a * m.eps01, epsilon = 1e-15);
            assert_abs_diff_eq!(c10, b * m.eps10, epsilon = 1e-15);
            assert!(!ch.clamped);
        }
        assert!(amplification_channel(&m, 0.5, 1.0).is_err());
        // target below the calibrated channel is unreachable
        let big = ReadoutModel { eps10: 0.4, eps01: 0.3, ..m };
        assert!(amplification_channel(&big, 3.0, 1.0).unwrap().clamped);
    }

    #[test]
    fn composed_rates_match_target_empirically() {
        let m = ReadoutModel::default();
        let (alpha, beta) = (3.0, 2.0);
        let ch = amplification_channel(&m, alpha, beta).unwrap();
        let zeros = BitstringSample::from_counts(10, BTreeMap::from([(0u64, 100_000)]));
        let stage = apply_readout_noise(&zeros, m.eps01, m.eps10, 1).unwrap();
        let out = apply_readout_noise(&stage, ch.q01, ch.q10, 2).unwrap();
        assert!(binomial_ok(count_ones(&out), 1e6, alpha * m.eps01));
        let stage = apply_readout_noise(&ones(10, 100_000), m.eps01, m.eps10, 3).unwrap();
        let out = apply_readout_noise(&stage, ch.q01, ch.q10, 4).unwrap();
        assert!(binomial_ok(1e6 - count_ones(&out), 1e6, beta * m.eps10));
    }

    #[test]
    fn grid_validation() {
        assert!(ZneGrid::default().validate().is_ok());
        assert!(ZneGrid { alphas: vec![2.0, 3.0], ..Default::default() }.validate().is_err());
        assert!(ZneGrid { betas: vec![1.0, 0.5], ..Default::default() }.validate().is_err());
        assert!(ZneGrid { repeats: 0, ..Default::default() }.validate().is_err());
        assert!(ReadoutModel::new(0.6, 0.0, 0.0, 0.0).is_err());
        assert!(ReadoutModel::new(0.06, 0.01, -1.0, 0.0).is_err());
    }

    fn sample_of(n: usize) -> BitstringSample {
        let mut c = BTreeMap::new();
        c.insert(0b0101_0101u64 & ((1 << n) - 1), 600);
        c.insert(0b0100_1001u64 & ((1 << n) - 1), 300);
        c.insert(0b0000_0101u64 & ((1 << n) - 1), 100);
        BitstringSample::from_counts(n, c)
    }

    #[test]
    fn noiseless_model_returns_raw_value() {
        let s = sample_of(8);
        let raw = estimate_moments(&s, Boundary::Periodic).unwrap();
        let trivial = ZneGrid { alphas: vec![1.0], betas: vec![1.0], repeats: 1, seed: 0 };
        for grid in [trivial, ZneGrid::default()] {
            let r = zne_mitigate(&s, Boundary::Periodic, &ReadoutModel::noiseless(), &grid, WallObservable::WallMean, FitOrder::Linear).unwrap();
            assert_abs_diff_eq!(r.value, raw.mean, epsilon = 1e-12);
            let r = zne_mitigate(&s, Boundary::Periodic, &ReadoutModel::noiseless(), &grid, WallObservable::WallVar, FitOrder::Quadratic).unwrap();
            assert_abs_diff_eq!(r.value, raw.var, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_betas_for_order() {
        let s = sample_of(8);
        let grid = ZneGrid { betas: vec![1.0, 2.0], repeats: 1, ..Default::default() };
        let err = zne_mitigate(&s, Boundary::Periodic, &ReadoutModel::default(), &grid, WallObservable::WallVar, FitOrder::Quadratic);
        assert!(matches!(err, Err(Error::InvalidGrid(_))));
    }

    /// Random distribution over all `2^n` strings.
    fn random_probs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..1usize << n).map(|_| rng.gen::<f64>().powi(4)).collect();
        let t: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / t).collect()
    }

    #[test]
    fn noisy_distribution_matches_per_bit_channel() {
        let probs = random_probs(3, 1);
        let (e01, e10) = (0.03, 0.11);
        let noisy = noisy_distribution(&probs, 3, e01, e10);
        for (m, q) in noisy.iter().enumerate() {
            let mut expect = 0.0;
            for (t, p) in probs.iter().enumerate() {
                let mut w = 1.0;
                for j in 0..3 {
                    let (tb, mb) = ((t >> j) & 1, (m >> j) & 1);
                    w *= match (tb, mb) {
                        (0, 0) => 1.0 - e01,
                        (0, _) => e01,
                        (_, 0) => e10,
                        _ => 1.0 - e10,
                    };
                }
                expect += w * p;
            }
            assert_abs_diff_eq!(*q, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn occupation_is_linear_in_rates_so_linear_zne_is_exact() {
        // <n> = p (1 - eps10) + (1 - p) eps01: a linear extrapolation recovers p exactly
        let p: f64 = 0.37;
        let m = ReadoutModel::default();
        let grid = ZneGrid::default();
        let mut rows = Vec::new();
        for &beta in &grid.betas {
            rows.push(
                grid.alphas
                    .iter()
                    .map(|&alpha| {
                        let (e01, e10) = (alpha * m.eps01, beta * m.eps10);
                        GridValue {
                            alpha,
                            beta,
                            eps01: e01,
                            eps10: e10,
                            channel: amplification_channel(&m, alpha, beta).unwrap(),
                            value: p * (1.0 - e10) + (1.0 - p) * e01,
                            stderr: 0.0,
                        }
                    })
                    .collect(),
            );
        }
        let r = extrapolate_grid(&rows, &m, WallObservable::WallMean, FitOrder::Linear).unwrap();
        assert_abs_diff_eq!(r.value, p, epsilon = 1e-12);
    }

    /// Random distribution supported on blockaded ring configurations.
    fn random_blockaded_probs(n: usize, seed: u64) -> Vec<f64> {
        let mut p = random_probs(n, seed);
        for (s, v) in p.iter_mut().enumerate() {
            let rot = ((s << 1) | (s >> (n - 1))) & ((1 << n) - 1);
            if s & rot != 0 {
                *v = 0.0;
            }
        }
        let t: f64 = p.iter().sum();
        p.into_iter().map(|v| v / t).collect()
    }

    #[test]
    fn wall_mean_linear_zne_and_confusion_inverse_agree_to_second_order() {
        // on blockaded states the noisy wall mean is linear in eps10 but carries
        // an eps01^2 term, so the estimators agree up to O(eps01^2 <D>)
        let n = 8;
        let m = ReadoutModel::default();
        for seed in 0..5 {
            let probs = random_blockaded_probs(n, seed);
            let (exact, _) = wall_moments_of_distribution(&probs, n, Boundary::Periodic);
            let zne = zne_expectation(&probs, n, Boundary::Periodic, &m, &ZneGrid::default(), WallObservable::WallMean, FitOrder::Linear).unwrap();
            let bound = 10.0 * m.eps01 * m.eps01 * n as f64;
            assert!((zne.value - exact).abs() < bound, "{} vs {exact}", zne.value);
        }
    }

    #[test]
    fn confusion_inverse_exact_on_expectations() {
        // apply the per-shot functional to the exact noisy distribution
        let n = 6;
        let m = ReadoutModel::default();
        let probs = random_probs(n, 9);
        let (exact, _) = wall_moments_of_distribution(&probs, n, Boundary::Periodic);
        let noisy = noisy_distribution(&probs, n, m.eps01, m.eps10);
        let scale = 1e9;
        let counts: BTreeMap<u64, u64> = noisy.iter().enumerate().map(|(s, p)| (s as u64, (p * scale).round() as u64)).collect();
        let r = confusion_inverse_mean(&BitstringSample::from_counts(n, counts), Boundary::Periodic, &m).unwrap();
        assert_abs_diff_eq!(r.value, exact, epsilon = 1e-6);
        assert!(confusion_inverse_mean(&sample_of(8), Boundary::Periodic, &ReadoutModel::noiseless()).is_ok());
    }

    #[test]
    fn confusion_inverse_is_identity_without_noise() {
        let s = sample_of(8);
        let r = confusion_inverse_mean(&s, Boundary::Periodic, &ReadoutModel::noiseless()).unwrap();
        assert_abs_diff_eq!(r.value, estimate_moments(&s, Boundary::Periodic).unwrap().mean, epsilon = 1e-12);
    }

    #[test]
    fn wall_variance_is_convex_in_eps10() {
        let n = 8;
        for seed in 0..4 {
            let probs = random_probs(n, 100 + seed);
            let var_at = |e10: f64| wall_moments_of_distribution(&noisy_distribution(&probs, n, 0.009, e10), n, Boundary::Periodic).1;
            let xs: Vec<f64> = (0..=8).map(|k| 0.0305 * k as f64 / 2.0).collect();
            for w in xs.windows(3) {
                let second = var_at(w[0]) - 2.0 * var_at(w[1]) + var_at(w[2]);
                assert!(second > 0.0, "seed {seed} at {:?}: {second}", w);
            }
        }
    }

    #[test]
    fn systematic_error_behaviour() {
        let s = sample_of(8);
        let grid = ZneGrid { repeats: 1, ..Default::default() };
        let exact = ReadoutModel { d_eps10: 0.0, d_eps01: 0.0, ..Default::default() };
        let obs = WallObservable::WallMean;
        let sys = |m: &ReadoutModel, v| systematic_error(&s, Boundary::Periodic, m, &grid, obs, FitOrder::Linear, v).unwrap();
        assert_eq!(sys(&exact, SystematicVariants::OneAtATime), 0.0);
        let base = ReadoutModel::default();
        let doubled = ReadoutModel { d_eps10: 2.0 * base.d_eps10, ..base };
        let (a, b) = (sys(&base, SystematicVariants::OneAtATime), sys(&doubled, SystematicVariants::OneAtATime));
        assert!(a > 0.0 && b >= a, "{a} {b}");
        assert!(sys(&base, SystematicVariants::Corners) > 0.0);
        let r = zne_with_systematics(&s, Boundary::Periodic, &base, &grid, obs, FitOrder::Linear, SystematicVariants::OneAtATime).unwrap();
        assert_eq!(r.sys_err, a);
        assert!(r.stat_err > 0.0);
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.json");
        ReadoutModel::default().save(&p).unwrap();
        assert_eq!(ReadoutModel::load(&p).unwrap(), ReadoutModel::default());
        std::fs::write(&p, r#"{"eps10": 0.7, "eps01": 0.0}"#).unwrap();
        assert!(ReadoutModel::load(&p).is_err());
    }
}
