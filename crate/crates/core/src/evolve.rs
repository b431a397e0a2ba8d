//! Time evolution `d psi/dt = -i H(t) psi` over a drive protocol.
//!
//! Each step uses the fourth-order commutator-free Magnus propagator
//!
//! ```text
//! U(t+h, t) = exp(-i h (a1 H(t1) + a2 H(t2))) exp(-i h (a2 H(t1) + a1 H(t2)))
//! ```
//!
//! with Gauss points `t1,2 = t + (1/2 -+ sqrt(3)/6) h` and
//! `a1,2 = (3 -+ 2 sqrt(3)) / 12`. Because `H` is affine in `(Omega, Delta)`
//! each factor is the propagator of a single Rydberg Hamiltonian with
//! blended drive values, applied with a Krylov exponential. Step sizes are
//! chosen by step doubling. Segments with constant drive are propagated
//! exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_correlation_length, CorrPoint};
use crate::basis::ConstrainedBasis;
use crate::error::{Error, Result};
use crate::hamiltonian::RydbergHamiltonian;
use crate::krylov::{expmv, KrylovWorkspace};
use crate::observables::{
    defect_correlators, defect_distribution, defect_moments, density_correlators, DefectDistribution,
};
use crate::protocol::{build_kz_protocol, gamma_rate};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const C1: f64 = 0.5 - SQRT3 / 6.0;
const C2: f64 = 0.5 + SQRT3 / 6.0;
const A1: f64 = (3.0 - 2.0 * SQRT3) / 12.0;
const A2: f64 = (3.0 + 2.0 * SQRT3) / 12.0;

/// Norm tolerance accepted by [`QuantumState::new`].
pub const NORM_TOL: f64 = 1e-8;

/// Pure state over a basis.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumState {
    basis: Arc<ConstrainedBasis>,
    amplitudes: Vec<Complex64>,
}

impl QuantumState {
    /// Wraps amplitudes that are already normalised.
    pub fn new(basis: Arc<ConstrainedBasis>, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: amplitudes.len() });
        }
        let state = Self { basis, amplitudes };
        let drift = state.norm_drift();
        if !(drift.abs() <= NORM_TOL) {
            return Err(Error::InvalidParameter(format!("state norm deviates from 1 by {drift:e}")));
        }
        Ok(state)
    }

    /// Scales the amplitudes to unit norm.
    pub fn normalized(basis: Arc<ConstrainedBasis>, mut amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: amplitudes.len() });
        }
        let nrm = norm(&amplitudes);
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::InvalidParameter("cannot normalise a zero or non-finite vector".into()));
        }
        amplitudes.iter_mut().for_each(|a| *a /= nrm);
        Ok(Self { basis, amplitudes })
    }

    /// Product state with amplitude one on `mask`.
    pub fn basis_state(basis: Arc<ConstrainedBasis>, mask: u64) -> Result<Self> {
        let idx = crate::basis::state_index(&basis, mask)?;
        let mut amplitudes = vec![Complex64::default(); basis.dim()];
        amplitudes[idx] = Complex64::new(1.0, 0.0);
        Ok(Self { basis, amplitudes })
    }

    pub fn basis(&self) -> &Arc<ConstrainedBasis> {
        &self.basis
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amplitudes)
    }

    /// `||psi|| - 1`.
    pub fn norm_drift(&self) -> f64 {
        self.norm() - 1.0
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &QuantumState) -> f64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr()
    }

    /// Probability of every basis state.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Writes a binary dump (interleaved little-endian `re, im` doubles) to
    /// `path` and a JSON header to `path.json`.
    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let header = StateHeader {
            n_sites: self.basis.n_sites(),
            boundary: self.basis.boundary(),
            constrained: self.basis.constrained(),
            dim: self.dim(),
            layout: "interleaved re/im f64 little-endian".into(),
            provenance,
        };
        let mut w = BufWriter::new(File::create(path)?);
        for a in &self.amplitudes {
            w.write_all(&a.re.to_le_bytes())?;
            w.write_all(&a.im.to_le_bytes())?;
        }
        w.flush()?;
        let f = File::create(crate::observables::sidecar_path(path))?;
        serde_json::to_writer_pretty(f, &header)?;
        Ok(())
    }

    /// Reads a dump written by [`save`](Self::save) and rebuilds its basis.
    pub fn load(path: &Path) -> Result<Self> {
        let header: StateHeader = serde_json::from_reader(File::open(crate::observables::sidecar_path(path))?)?;
        let basis = Arc::new(crate::basis::enumerate_basis(header.n_sites, header.boundary, header.constrained)?);
        if basis.dim() != header.dim {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: header.dim });
        }
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != 16 * header.dim {
            return Err(Error::DimensionMismatch { expected: 16 * header.dim, got: bytes.len() });
        }
        let amplitudes = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                Complex64::new(re, im)
            })
            .collect();
        Self::new(basis, amplitudes)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateHeader {
    #[serde(rename = "L")]
    n_sites: usize,
    boundary: crate::geometry::Boundary,
    constrained: bool,
    dim: usize,
    layout: String,
    #[serde(default)]
    provenance: serde_json::Value,
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// All atoms in the ground state.
pub fn initial_vacuum(basis: Arc<ConstrainedBasis>) -> QuantumState {
    QuantumState::basis_state(basis, 0).expect("the empty configuration is always in the basis")
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest step, us.
    pub max_step: f64,
    /// Only order 4 is implemented.
    pub method_order: usize,
    /// First trial step, us.
    pub initial_step: f64,
    /// Steps shorter than this abort the integration, us.
    pub min_step: f64,
    pub max_krylov_dim: usize,
    pub max_steps: usize,
    /// Keep full states at every sample time.
    pub store_states: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.5,
            method_order: 4,
            initial_step: 1e-3,
            min_step: 1e-10,
            max_krylov_dim: 40,
            max_steps: 50_000_000,
            store_states: false,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return bad(format!("tolerances must be positive (rel {}, abs {})", self.rel_tol, self.abs_tol));
        }
        if !(self.max_step > 0.0) || !(self.initial_step > 0.0) || !(self.min_step > 0.0) {
            return bad("step sizes must be positive".into());
        }
        if self.method_order != 4 {
            return bad(format!("method order {} not available (only 4)", self.method_order));
        }
        if self.max_krylov_dim < 4 {
            return bad("max_krylov_dim must be at least 4".into());
        }
        Ok(())
    }

    fn step_tol(&self) -> f64 {
        self.abs_tol + self.rel_tol
    }

    fn krylov_tol(&self) -> f64 {
        0.01 * self.step_tol()
    }
}

/// Work counters and error bookkeeping of one integration.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolveDiagnostics {
    pub steps: usize,
    pub rejected: usize,
    pub matvecs: usize,
    /// Sum of local error estimates of accepted steps.
    pub error_estimate: f64,
    /// Largest `| ||psi|| - 1 |` seen at sample times and at the end.
    pub max_norm_drift: f64,
    pub max_krylov_dim: usize,
}

struct Stepper<'a> {
    h: &'a RydbergHamiltonian,
    cfg: IntegratorConfig,
    ws: KrylovWorkspace,
    tmp: Vec<Complex64>,
    diag: EvolveDiagnostics,
}

impl<'a> Stepper<'a> {
    /// `out = exp(-i dt H(omega, delta)) v`; false if Krylov did not converge.
    fn exp(&mut self, omega: f64, delta: f64, dt: f64, v: &[Complex64], out: &mut [Complex64]) -> bool {
        let h = self.h;
        let mut count = 0usize;
        let info = expmv(
            |x, y| {
                count += 1;
                h.apply_fixed(omega, delta, x, y)
            },
            v,
            dt,
            self.cfg.krylov_tol(),
            self.cfg.max_krylov_dim,
            &mut self.ws,
            out,
        );
        self.diag.matvecs += count;
        self.diag.max_krylov_dim = self.diag.max_krylov_dim.max(info.krylov_dim);
        info.converged
    }

    /// One Magnus step of length `dt` from `t`.
    fn magnus(&mut self, t: f64, dt: f64, v: &[Complex64], out: &mut [Complex64]) -> Result<bool> {
        let (o1, d1) = self.h.drive_at(t + C1 * dt)?;
        let (o2, d2) = self.h.drive_at(t + C2 * dt)?;
        let mut mid = std::mem::take(&mut self.tmp);
        mid.resize(v.len(), Complex64::default());
        let ok = self.exp(2.0 * (A2 * o1 + A1 * o2), 2.0 * (A2 * d1 + A1 * d2), 0.5 * dt, v, &mut mid)
            && self.exp(2.0 * (A1 * o1 + A2 * o2), 2.0 * (A1 * d1 + A2 * d2), 0.5 * dt, &mid, out);
        self.tmp = mid;
        Ok(ok)
    }

    /// Adaptive integration from `t0` to `t1` within one smooth segment.
    fn smooth(&mut self, psi: &mut Vec<Complex64>, t0: f64, t1: f64, step: &mut f64) -> Result<()> {
        let n = psi.len();
        let mut coarse = vec![Complex64::default(); n];
        let mut half = vec![Complex64::default(); n];
        let mut fine = vec![Complex64::default(); n];
        let mut t = t0;
        let tol = self.cfg.step_tol();
        while t < t1 {
            let remaining = t1 - t;
            let mut dt = step.min(self.cfg.max_step);
            let last = dt >= remaining * (1.0 - 1e-12);
            if last {
                dt = remaining;
            }
            if dt < self.cfg.min_step && !last {
                return Err(Error::Integration { t, step: dt, reason: "step size underflow".into() });
            }
            if self.diag.steps + self.diag.rejected >= self.cfg.max_steps {
                return Err(Error::Integration { t, step: dt, reason: "step budget exhausted".into() });
            }
            let ok = self.magnus(t, dt, psi, &mut coarse)?
                && self.magnus(t, 0.5 * dt, psi, &mut half)?
                && self.magnus(t + 0.5 * dt, 0.5 * dt, &half, &mut fine)?;
            let err = if ok {
                coarse.iter().zip(&fine).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / 15.0
            } else {
                f64::INFINITY
            };
            if err <= tol {
                std::mem::swap(psi, &mut fine);
                t = if last { t1 } else { t + dt };
                self.diag.steps += 1;
                self.diag.error_estimate += err;
                let factor = if err == 0.0 { 4.0 } else { 0.9 * (tol / err).powf(0.2) };
                // a truncated final step says nothing about the natural step size
                if !last || factor < 1.0 {
                    *step = dt * factor.clamp(0.2, 4.0);
                }
            } else {
                self.diag.rejected += 1;
                let factor = if err.is_finite() { 0.9 * (tol / err).powf(0.2) } else { 0.25 };
                *step = dt * factor.clamp(0.2, 0.9);
                if *step < self.cfg.min_step {
                    return Err(Error::Integration {
                        t,
                        step: *step,
                        reason: format!("step size underflow (local error {err:e})"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Exact propagation over `[t0, t1]` where the drive is constant.
    fn constant(&mut self, psi: &mut Vec<Complex64>, t0: f64, t1: f64) -> Result<()> {
        let (omega, delta) = self.h.drive_at(0.5 * (t0 + t1))?;
        let mut out = vec![Complex64::default(); psi.len()];
        let mut t = t0;
        let mut chunk = t1 - t0;
        while t < t1 {
            let dt = chunk.min(t1 - t);
            if self.exp(omega, delta, dt, psi, &mut out) {
                std::mem::swap(psi, &mut out);
                t += dt;
                self.diag.steps += 1;
                if t1 - t <= 1e-12 * t1.abs().max(1.0) {
                    t = t1;
                }
            } else {
                self.diag.rejected += 1;
                chunk *= 0.5;
                if chunk < self.cfg.min_step {
                    return Err(Error::Integration { t, step: chunk, reason: "Krylov exponential did not converge".into() });
                }
            }
        }
        Ok(())
    }
}

fn drive_constant(h: &RydbergHamiltonian, a: f64, b: f64) -> Result<bool> {
    Ok(h.drive_at(a)? == h.drive_at(b)?)
}

/// Integrates from `t0` to `t1`, calling `observer` with the state at each
/// entry of `sample_times` (increasing, inside `[t0, t1]`).
pub fn evolve_observed<F>(
    h: &RydbergHamiltonian,
    psi0: &QuantumState,
    t0: f64,
    t1: f64,
    sample_times: &[f64],
    config: &IntegratorConfig,
    mut observer: F,
) -> Result<(QuantumState, EvolveDiagnostics)>
where
    F: FnMut(f64, &QuantumState) -> Result<()>,
{
    config.validate()?;
    if !Arc::ptr_eq(psi0.basis(), h.basis()) && psi0.basis().states() != h.basis().states() {
        return Err(Error::DimensionMismatch { expected: h.dim(), got: psi0.dim() });
    }
    let duration = h.protocol().duration;
    if !(t0 < t1) || t0 < -1e-12 || t1 > duration + 1e-12 {
        return Err(Error::OutOfDomain { t: if t0 < 0.0 || !(t0 < t1) { t0 } else { t1 }, start: 0.0, end: duration });
    }
    let drift = psi0.norm_drift();
    if drift.abs() > NORM_TOL {
        return Err(Error::InvalidParameter(format!("initial state norm deviates from 1 by {drift:e}")));
    }
    if sample_times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter("sample times must be strictly increasing".into()));
    }
    if let Some(&t) = sample_times.iter().find(|&&t| t < t0 - 1e-12 || t > t1 + 1e-12) {
        return Err(Error::OutOfDomain { t, start: t0, end: t1 });
    }

    // every breakpoint and sample time ends a step
    let mut stops: Vec<(f64, bool)> = h
        .protocol()
        .breakpoints()
        .into_iter()
        .filter(|&b| b > t0 && b < t1)
        .map(|b| (b, false))
        .chain(sample_times.iter().map(|&s| (s.clamp(t0, t1), true)))
        .chain(std::iter::once((t1, false)))
        .collect();
    stops.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut st = Stepper { h, cfg: *config, ws: KrylovWorkspace::new(), tmp: Vec::new(), diag: EvolveDiagnostics::default() };
    let mut psi = psi0.amplitudes.clone();
    let mut step = config.initial_step;
    let mut t = t0;
    let basis = psi0.basis.clone();
    let record = |t: f64, psi: &[Complex64], diag: &mut EvolveDiagnostics, observer: &mut F| -> Result<()> {
        let state = QuantumState { basis: basis.clone(), amplitudes: psi.to_vec() };
        diag.max_norm_drift = diag.max_norm_drift.max(state.norm_drift().abs());
        observer(t, &state)
    };
    for (stop, is_sample) in stops {
        if stop > t {
            // [t, stop] lies inside one linear piece, so equal end values mean a constant drive
            if drive_constant(h, t, stop)? {
                st.constant(&mut psi, t, stop)?;
            } else {
                st.smooth(&mut psi, t, stop, &mut step)?;
            }
            t = stop;
        }
        if is_sample {
            record(stop, &psi, &mut st.diag, &mut observer)?;
        }
    }
    let final_state = QuantumState { basis: psi0.basis.clone(), amplitudes: psi };
    st.diag.max_norm_drift = st.diag.max_norm_drift.max(final_state.norm_drift().abs());
    Ok((final_state, st.diag))
}

/// Observables recorded at one sample time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub mean_d: f64,
    pub var_d: f64,
    /// Density correlation length, `NaN` when the fit is not possible.
    pub xi: f64,
    /// `<H(t)>`, rad/us.
    pub energy: f64,
    pub norm_drift: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub sample_times: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    /// Full states, only when [`IntegratorConfig::store_states`] is set.
    pub states: Option<Vec<QuantumState>>,
    pub diagnostics: EvolveDiagnostics,
}

/// Default window `l in [1, 6]` for correlation-length fits.
pub const XI_WINDOW: (f64, f64) = (1.0, 6.0);

/// Density correlation length of a state over [`XI_WINDOW`] (clipped to the chain).
pub fn density_correlation_length(state: &QuantumState) -> Result<crate::analysis::FitResult> {
    let n = state.basis().n_sites();
    let max_l = match state.basis().boundary() {
        crate::geometry::Boundary::Periodic => n / 2,
        crate::geometry::Boundary::Open => n.saturating_sub(1),
    }
    .min(XI_WINDOW.1 as usize);
    let c = density_correlators(state, max_l)?;
    let pts: Vec<CorrPoint> = c.iter().enumerate().map(|(l, &v)| CorrPoint::exact(l, v)).collect();
    fit_correlation_length(&pts, XI_WINDOW)
}

pub fn snapshot(h: &RydbergHamiltonian, t: f64, state: &QuantumState) -> Result<Snapshot> {
    let (mean_d, var_d) = defect_moments(state);
    let xi = density_correlation_length(state).map_or(f64::NAN, |f| f.value("xi"));
    let (omega, delta) = h.drive_at(t)?;
    Ok(Snapshot {
        t,
        mean_d,
        var_d,
        xi,
        energy: h.expectation(omega, delta, state.amplitudes()),
        norm_drift: state.norm_drift(),
    })
}

/// Integrates from `t0` to `t1` recording a [`Snapshot`] at each sample time.
pub fn evolve(
    h: &RydbergHamiltonian,
    psi0: &QuantumState,
    t0: f64,
    t1: f64,
    config: &IntegratorConfig,
    sample_times: &[f64],
) -> Result<(Trajectory, QuantumState)> {
    let mut snapshots = Vec::with_capacity(sample_times.len());
    let mut states = config.store_states.then(Vec::new);
    let (last, diagnostics) = evolve_observed(h, psi0, t0, t1, sample_times, config, |t, s| {
        snapshots.push(snapshot(h, t, s)?);
        if let Some(v) = states.as_mut() {
            v.push(s.clone());
        }
        Ok(())
    })?;
    Ok((Trajectory { sample_times: sample_times.to_vec(), snapshots, states, diagnostics }, last))
}

/// How hold observables are read out.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldReadout {
    /// Each hold time is followed by the final Omega ramp-down before measuring.
    #[default]
    AfterRampDown,
    /// Measure the state directly, with the drive still on.
    DuringHold,
}

/// Snapshots of a hold protocol at `sample_times` (inside the hold window).
///
/// With [`HoldReadout::AfterRampDown`] every sampled state is propagated
/// through the closing Omega ramp before its observables are taken, as in a
/// prepare-and-hold measurement; `energy` is still that of the hold state.
pub fn evolve_hold(
    h: &RydbergHamiltonian,
    config: &IntegratorConfig,
    sample_times: &[f64],
    readout: HoldReadout,
) -> Result<Trajectory> {
    let protocol = h.protocol();
    let hold_end = protocol
        .markers
        .hold_end
        .ok_or_else(|| Error::InvalidProtocol("protocol has no hold segment".into()))?;
    let (ramp_end, duration) = (protocol.markers.ramp_end, protocol.duration);
    if let Some(&t) = sample_times.iter().find(|&&t| t < ramp_end - 1e-12 || t > hold_end + 1e-12) {
        return Err(Error::OutOfDomain { t, start: ramp_end, end: hold_end });
    }
    let psi0 = initial_vacuum(h.basis().clone());
    let mut snapshots = Vec::with_capacity(sample_times.len());
    let mut states = config.store_states.then(Vec::new);
    let closing = match readout {
        HoldReadout::AfterRampDown => {
            // the closing segment of the protocol, shifted to start at zero
            let t_edge = duration - hold_end;
            let omega = h.protocol().omega_at(hold_end)?;
            let delta = h.protocol().delta_at(hold_end)?;
            let p = crate::protocol::DriveProtocol::new(
                crate::protocol::Waveform::new(vec![(0.0, omega), (t_edge, h.protocol().omega_at(duration)?)])?,
                crate::protocol::Waveform::new(vec![(0.0, delta), (t_edge, h.protocol().delta_at(duration)?)])?,
                crate::protocol::ProtocolMarkers { ramp_start: 0.0, ramp_end: 0.0, hold_end: None },
            )?;
            Some((h.with_protocol(p), t_edge))
        }
        HoldReadout::DuringHold => None,
    };
    let mut extra = EvolveDiagnostics::default();
    let (_, mut diagnostics) = evolve_observed(h, &psi0, 0.0, hold_end, sample_times, config, |t, s| {
        let (omega, delta) = h.drive_at(t)?;
        let energy = h.expectation(omega, delta, s.amplitudes());
        let measured = match &closing {
            Some((hc, t_edge)) => {
                let (out, d) = evolve_observed(hc, s, 0.0, *t_edge, &[], config, |_, _| Ok(()))?;
                extra.steps += d.steps;
                extra.rejected += d.rejected;
                extra.matvecs += d.matvecs;
                extra.error_estimate += d.error_estimate;
                extra.max_norm_drift = extra.max_norm_drift.max(d.max_norm_drift);
                extra.max_krylov_dim = extra.max_krylov_dim.max(d.max_krylov_dim);
                out
            }
            None => s.clone(),
        };
        let (mean_d, var_d) = defect_moments(&measured);
        snapshots.push(Snapshot {
            t,
            mean_d,
            var_d,
            xi: density_correlation_length(&measured).map_or(f64::NAN, |f| f.value("xi")),
            energy,
            norm_drift: measured.norm_drift(),
        });
        if let Some(v) = states.as_mut() {
            v.push(measured);
        }
        Ok(())
    })?;
    diagnostics.steps += extra.steps;
    diagnostics.rejected += extra.rejected;
    diagnostics.matvecs += extra.matvecs;
    diagnostics.error_estimate += extra.error_estimate;
    diagnostics.max_norm_drift = diagnostics.max_norm_drift.max(extra.max_norm_drift);
    diagnostics.max_krylov_dim = diagnostics.max_krylov_dim.max(extra.max_krylov_dim);
    Ok(Trajectory { sample_times: sample_times.to_vec(), snapshots, states, diagnostics })
}

impl Trajectory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "t_us,mean_D,var_D,xi,energy,norm_drift")?;
        for s in &self.snapshots {
            writeln!(w, "{},{},{},{},{},{:e}", s.t, s.mean_d, s.var_d, s.xi, s.energy, s.norm_drift)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` evenly spaced times covering `[t0, t1]` inclusive.
pub fn uniform_times(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t1],
        _ => (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Final-state observables of one ramp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepObservables {
    pub mean_d: f64,
    pub var_d: f64,
    pub distribution: DefectDistribution,
    /// `C_n(l)` for `l = 0..`.
    pub density_corr: Vec<f64>,
    /// `C_D(l)` for `l = 0..`.
    pub defect_corr: Vec<f64>,
    pub diagnostics: EvolveDiagnostics,
}

#[derive(Debug)]
pub struct SweepPoint {
    pub t_delta: f64,
    /// Linear quench rate, MHz/us.
    pub gamma: f64,
    pub result: Result<SweepObservables>,
}

/// Correlator range recorded by sweeps for a chain of `n` sites.
pub fn sweep_max_l(n: usize, boundary: crate::geometry::Boundary) -> usize {
    match boundary {
        crate::geometry::Boundary::Periodic => n / 2,
        crate::geometry::Boundary::Open => n.saturating_sub(2),
    }
}

/// Evolves the vacuum through a full ramp and measures the final state.
pub fn run_kz_point(h: &RydbergHamiltonian, t_delta: f64, t_edge: f64, config: &IntegratorConfig) -> Result<SweepObservables> {
    run_kz_point_with_state(h, t_delta, t_edge, config).map(|(o, _)| o)
}

/// [`run_kz_point`] that also returns the final state.
pub fn run_kz_point_with_state(
    h: &RydbergHamiltonian,
    t_delta: f64,
    t_edge: f64,
    config: &IntegratorConfig,
) -> Result<(SweepObservables, QuantumState)> {
    let protocol = build_kz_protocol(t_delta, h.params(), t_edge)?;
    let duration = protocol.duration;
    let h = h.with_protocol(protocol);
    let psi0 = initial_vacuum(h.basis().clone());
    let (psi, diagnostics) = evolve_observed(&h, &psi0, 0.0, duration, &[], config, |_, _| Ok(()))?;
    let (mean_d, var_d) = defect_moments(&psi);
    let basis = psi.basis();
    let max_l = sweep_max_l(basis.n_sites(), basis.boundary());
    let obs = SweepObservables {
        mean_d,
        var_d,
        distribution: defect_distribution(&psi),
        density_corr: density_correlators(&psi, max_l)?,
        defect_corr: defect_correlators(&psi, max_l)?,
        diagnostics,
    };
    Ok((obs, psi))
}

/// Runs every ramp time on the current rayon pool; results keep input order
/// and failures stay attached to their point.
pub fn run_kz_sweep(h: &RydbergHamiltonian, t_deltas: &[f64], t_edge: f64, config: &IntegratorConfig) -> Vec<SweepPoint> {
    t_deltas
        .par_iter()
        .map(|&t_delta| {
            let gamma = gamma_rate(t_delta, h.params()).unwrap_or(f64::NAN);
            let result = run_kz_point(h, t_delta, t_edge, config);
            if let Err(e) = &result {
                log::warn!("ramp t_delta = {t_delta} us failed: {e}");
            } else {
                log::info!("ramp t_delta = {t_delta} us done");
            }
            SweepPoint { t_delta, gamma, result }
        })
        .collect()
}

/// Log-spaced ramp times giving linear rates between `gamma_lo` and `gamma_hi` (MHz/us),
/// slowest ramp first.
pub fn log_spaced_t_deltas(gamma_lo: f64, gamma_hi: f64, n: usize, params: &crate::protocol::RydbergParams) -> Result<Vec<f64>> {
    if !(gamma_lo > 0.0 && gamma_hi > gamma_lo) {
        return Err(Error::InvalidParameter(format!("bad rate range [{gamma_lo}, {gamma_hi}]")));
    }
    (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let g = (gamma_lo.ln() + f * (gamma_hi / gamma_lo).ln()).exp();
            crate::protocol::t_delta_for_gamma(g, params)
        })
        .collect()
}
