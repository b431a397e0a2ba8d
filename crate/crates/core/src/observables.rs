//! Domain-wall (defect) statistics, connected correlators and bitstring
//! sampling.
//!
//! A domain wall sits on bond `(i, i+1)` when both atoms agree (`00` or `11`).
//! Rings have `L` bonds, open chains `L-1`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::ConstrainedBasis;
use crate::error::{Error, Result};
use crate::evolve::QuantumState;
use crate::geometry::Boundary;

fn low_mask(n_sites: usize) -> u64 {
    if n_sites >= 64 {
        u64::MAX
    } else {
        (1u64 << n_sites) - 1
    }
}

/// Number of bonds on which domain walls are counted.
pub fn bond_count(n_sites: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Periodic => n_sites,
        Boundary::Open => n_sites.saturating_sub(1),
    }
}

/// Number of neighbouring pairs with equal occupation.
pub fn domain_wall_count(mask: u64, n_sites: usize, boundary: Boundary) -> u32 {
    let full = low_mask(n_sites);
    match boundary {
        Boundary::Periodic => {
            let rotated = ((mask >> 1) | ((mask & 1) << (n_sites - 1))) & full;
            n_sites as u32 - ((mask ^ rotated) & full).count_ones()
        }
        Boundary::Open => {
            if n_sites < 2 {
                return 0;
            }
            let bonds = low_mask(n_sites - 1);
            (n_sites as u32 - 1) - ((mask ^ (mask >> 1)) & bonds).count_ones()
        }
    }
}

/// Bond occupation word: bit `i` set iff bond `(i, i+1)` carries a domain wall.
fn wall_mask(mask: u64, n_sites: usize, boundary: Boundary) -> u64 {
    let full = low_mask(n_sites);
    match boundary {
        Boundary::Periodic => {
            let rotated = ((mask >> 1) | ((mask & 1) << (n_sites - 1))) & full;
            !(mask ^ rotated) & full
        }
        Boundary::Open => !(mask ^ (mask >> 1)) & low_mask(n_sites.saturating_sub(1)),
    }
}

fn probabilities(state: &QuantumState) -> impl Iterator<Item = (u64, f64)> + '_ {
    state
        .basis()
        .states()
        .iter()
        .zip(state.amplitudes())
        .map(|(&s, a)| (s, a.norm_sqr()))
}

/// Exact `(<D>, var D)`; `D` is diagonal in the computational basis.
pub fn defect_moments(state: &QuantumState) -> (f64, f64) {
    let basis = state.basis();
    let (n, bc) = (basis.n_sites(), basis.boundary());
    let (mut m1, mut m2) = (0.0, 0.0);
    for (s, p) in probabilities(state) {
        let d = domain_wall_count(s, n, bc) as f64;
        m1 += p * d;
        m2 += p * d * d;
    }
    (m1, m2 - m1 * m1)
}

/// Probability mass over the domain-wall count `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectDistribution {
    /// `pmf[k]` = probability of exactly `k` walls, for `k = 0..=bonds`.
    pub pmf: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl DefectDistribution {
    pub fn from_pmf(pmf: Vec<f64>) -> Self {
        let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let second: f64 = pmf.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
        Self { pmf, mean, variance: second - mean * mean }
    }

    /// Total probability on odd `k`.
    pub fn odd_mass(&self) -> f64 {
        self.pmf.iter().skip(1).step_by(2).sum()
    }
}

pub fn defect_distribution(state: &QuantumState) -> DefectDistribution {
    let basis = state.basis();
    let (n, bc) = (basis.n_sites(), basis.boundary());
    let mut pmf = vec![0.0; bond_count(n, bc) + 1];
    for (s, p) in probabilities(state) {
        pmf[domain_wall_count(s, n, bc) as usize] += p;
    }
    DefectDistribution::from_pmf(pmf)
}

/// Site-averaged connected correlator of the `+-1` variables carried by
/// `words` (one bit per site or bond), for every displacement `0..=max_l`.
fn connected_correlators<F>(state: &QuantumState, width: usize, periodic: bool, max_l: usize, word: F) -> Vec<f64>
where
    F: Fn(u64) -> u64,
{
    let mut single = vec![0.0; width];
    let mut pair = vec![vec![0.0; width]; max_l + 1];
    let spin = |w: u64, i: usize| if (w >> i) & 1 == 1 { 1.0 } else { -1.0 };
    for (s, p) in probabilities(state) {
        if p == 0.0 {
            continue;
        }
        let w = word(s);
        for (i, acc) in single.iter_mut().enumerate() {
            *acc += p * spin(w, i);
        }
        for (l, row) in pair.iter_mut().enumerate() {
            for (i, acc) in row.iter_mut().enumerate() {
                let j = i + l;
                if j >= width && !periodic {
                    break;
                }
                *acc += p * spin(w, i) * spin(w, j % width);
            }
        }
    }
    (0..=max_l)
        .map(|l| {
            let pairs = if periodic { width } else { width - l };
            let total: f64 = (0..pairs)
                .map(|i| pair[l][i] - single[i] * single[(i + l) % width])
                .sum();
            total / pairs as f64
        })
        .collect()
}

fn max_displacement(width: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Periodic => width / 2,
        Boundary::Open => width.saturating_sub(1),
    }
}

/// Connected density correlators `C_n(l)` of `n~ = 2(n - 1/2)` for `l = 0..=max_l`.
pub fn density_correlators(state: &QuantumState, max_l: usize) -> Result<Vec<f64>> {
    let basis = state.basis();
    let (n, bc) = (basis.n_sites(), basis.boundary());
    let limit = max_displacement(n, bc);
    if max_l > limit {
        return Err(Error::InvalidParameter(format!("displacement {max_l} exceeds {limit} for L = {n}")));
    }
    Ok(connected_correlators(state, n, bc == Boundary::Periodic, max_l, |s| s))
}

/// Connected defect correlators `C_D(l)` of `D~_i = 2(D_i - 1/2)` for `l = 0..=max_l`,
/// measured between bonds `i` and `i + l`.
pub fn defect_correlators(state: &QuantumState, max_l: usize) -> Result<Vec<f64>> {
    let basis = state.basis();
    let (n, bc) = (basis.n_sites(), basis.boundary());
    let bonds = bond_count(n, bc);
    let limit = max_displacement(bonds, bc);
    if max_l > limit {
        return Err(Error::InvalidParameter(format!("displacement {max_l} exceeds {limit} for L = {n}")));
    }
    Ok(connected_correlators(state, bonds, bc == Boundary::Periodic, max_l, |s| wall_mask(s, n, bc)))
}

pub fn connected_density_correlator(state: &QuantumState, l: usize) -> Result<f64> {
    Ok(density_correlators(state, l)?[l])
}

pub fn connected_defect_correlator(state: &QuantumState, l: usize) -> Result<f64> {
    Ok(defect_correlators(state, l)?[l])
}

/// Measured bitstrings, aggregated by value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitstringSample {
    /// `(bitmask, count)`, sorted by bitmask, every count >= 1.
    pub shots: Vec<(u64, u64)>,
    pub n_sites: usize,
    pub total_shots: u64,
}

impl BitstringSample {
    /// Aggregates a list of individual shots.
    pub fn from_shots(n_sites: usize, shots: impl IntoIterator<Item = u64>) -> Self {
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for s in shots {
            *counts.entry(s).or_default() += 1;
        }
        Self::from_counts(n_sites, counts)
    }

    pub fn from_counts(n_sites: usize, counts: BTreeMap<u64, u64>) -> Self {
        let shots: Vec<(u64, u64)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let total_shots = shots.iter().map(|&(_, c)| c).sum();
        Self { shots, n_sites, total_shots }
    }

    /// Every shot individually, in bitmask order.
    pub fn expanded(&self) -> impl Iterator<Item = u64> + '_ {
        self.shots.iter().flat_map(|&(s, c)| std::iter::repeat(s).take(c as usize))
    }
}

/// I.i.d. draws from `|amplitude|^2`, reproducible for a given seed.
pub fn sample_bitstrings(state: &QuantumState, n_shots: u64, seed: u64) -> Result<BitstringSample> {
    if n_shots == 0 {
        return Err(Error::Sampling("need at least one shot".into()));
    }
    let weights: Vec<f64> = state.amplitudes().iter().map(|a| a.norm_sqr()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Sampling(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; weights.len()];
    for _ in 0..n_shots {
        counts[dist.sample(&mut rng)] += 1;
    }
    let basis = state.basis();
    let map = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .map(|(i, c)| (basis.state(i), c))
        .collect();
    Ok(BitstringSample::from_counts(basis.n_sites(), map))
}

/// Sample moments of `D` with their standard errors.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    pub se_mean: f64,
    /// Large-sample standard error `sqrt((m4 - var^2) / N)`.
    pub se_var: f64,
}

/// Moment estimates from `(value, count)` pairs.
pub fn moments_from_counts(values: impl Iterator<Item = (f64, u64)> + Clone) -> Result<MomentEstimate> {
    let n: u64 = values.clone().map(|(_, c)| c).sum();
    if n < 2 {
        return Err(Error::Sampling(format!("need at least 2 shots, got {n}")));
    }
    let nf = n as f64;
    let mean = values.clone().map(|(v, c)| v * c as f64).sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for (v, c) in values {
        let d = v - mean;
        m2 += c as f64 * d * d;
        m4 += c as f64 * d.powi(4);
    }
    let var = m2 / (nf - 1.0);
    let biased = m2 / nf;
    let m4 = m4 / nf;
    Ok(MomentEstimate {
        mean,
        var,
        se_mean: (var / nf).sqrt(),
        se_var: ((m4 - biased * biased).max(0.0) / nf).sqrt(),
    })
}

pub fn estimate_moments(sample: &BitstringSample, boundary: Boundary) -> Result<MomentEstimate> {
    let n = sample.n_sites;
    moments_from_counts(
        sample
            .shots
            .iter()
            .map(move |&(s, c)| (domain_wall_count(s, n, boundary) as f64, c)),
    )
}

/// Side-car metadata stored next to a shot file as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotMetadata {
    #[serde(rename = "L")]
    pub n_sites: usize,
    pub boundary: Boundary,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// `'0'/'1'` characters, atom 0 leftmost.
pub fn format_bits(mask: u64, n_sites: usize) -> String {
    (0..n_sites).map(|j| if (mask >> j) & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn parse_bits(text: &str) -> Option<u64> {
    if text.is_empty() || text.len() > 63 {
        return None;
    }
    text.chars().enumerate().try_fold(0u64, |acc, (j, c)| match c {
        '0' => Some(acc),
        '1' => Some(acc | (1u64 << j)),
        _ => None,
    })
}

/// Writes one line per distinct bitstring (`bits count`) plus the JSON side-car.
pub fn write_shot_file(path: &Path, sample: &BitstringSample, meta: &ShotMetadata) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &(s, c) in &sample.shots {
        writeln!(out, "{} {}", format_bits(s, sample.n_sites), c)?;
    }
    out.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads a shot file; lines are `bits` or `bits count`, `#` starts a comment.
/// The side-car is optional; when present its `L` must match the bit width.
pub fn read_shot_file(path: &Path) -> Result<(BitstringSample, Option<ShotMetadata>)> {
    let display = path.display().to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: display.clone(), line: lineno + 1, msg };
        let mut fields = body.split_whitespace();
        let bits = fields.next().unwrap_or_default();
        let mask = parse_bits(bits).ok_or_else(|| err(format!("invalid bitstring {bits:?}")))?;
        match width {
            None => width = Some(bits.len()),
            Some(w) if w != bits.len() => return Err(err(format!("expected {w} bits, found {}", bits.len()))),
            _ => {}
        }
        let count = match fields.next() {
            None => 1,
            Some(c) => c.parse::<u64>().map_err(|_| err(format!("invalid count {c:?}")))?,
        };
        if fields.next().is_some() {
            return Err(err("trailing fields".into()));
        }
        if count == 0 {
            return Err(err("count must be at least 1".into()));
        }
        *counts.entry(mask).or_default() += count;
    }
    let width = width.ok_or_else(|| Error::Parse { path: display.clone(), line: 0, msg: "no shots".into() })?;
    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        let meta: ShotMetadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if meta.n_sites != width {
            return Err(Error::Parse {
                path: meta_path.display().to_string(),
                line: 0,
                msg: format!("side-car L = {} but shots have {width} bits", meta.n_sites),
            });
        }
        Some(meta)
    } else {
        None
    };
    Ok((BitstringSample::from_counts(width, counts), meta))
}

/// Occupation probability `<n_j>` of every atom.
pub fn site_occupations(state: &QuantumState) -> Vec<f64> {
    let n = state.basis().n_sites();
    let mut occ = vec![0.0; n];
    for (s, p) in probabilities(state) {
        for (j, o) in occ.iter_mut().enumerate() {
            if (s >> j) & 1 == 1 {
                *o += p;
            }
        }
    }
    occ
}

/// Builds a normalised state from `(bitmask, amplitude)` pairs.
pub fn state_from_pairs(basis: std::sync::Arc<ConstrainedBasis>, pairs: &[(u64, Complex64)]) -> Result<QuantumState> {
    let mut amps = vec![Complex64::default(); basis.dim()];
    for &(s, a) in pairs {
        amps[crate::basis::state_index(&basis, s)?] += a;
    }
    QuantumState::new(basis, amps)
}
