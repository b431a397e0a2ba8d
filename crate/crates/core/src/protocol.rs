//! Drive waveforms and the ramp / hold protocols.
//!
//! All frequencies are angular, in rad/us. Use [`RydbergParams::from_linear_mhz`]
//! to convert values quoted as `X / 2pi = ... MHz`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a linear frequency in MHz to an angular frequency in rad/us.
pub fn mhz_to_angular(f_mhz: f64) -> f64 {
    2.0 * PI * f_mhz
}

/// Slack allowed when evaluating a waveform exactly at its end points.
const DOMAIN_SLACK: f64 = 1e-12;

/// Piecewise-linear waveform through `(t, value)` breakpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    breakpoints: Vec<(f64, f64)>,
}

impl Waveform {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidProtocol("a waveform needs at least two breakpoints".into()));
        }
        if let Some(w) = breakpoints.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidProtocol(format!(
                "breakpoint times must increase strictly ({} then {})",
                w[0].0, w[1].0
            )));
        }
        if breakpoints.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidProtocol("non-finite breakpoint".into()));
        }
        Ok(Self { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0].0
    }

    pub fn end(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1].0
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let (start, end) = (self.start(), self.end());
        let slack = DOMAIN_SLACK * end.abs().max(1.0);
        if !(t >= start - slack && t <= end + slack) {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let t = t.clamp(start, end);
        // first breakpoint strictly after t, but never past the last segment
        let k = self.breakpoints.partition_point(|&(tk, _)| tk <= t).clamp(1, self.breakpoints.len() - 1);
        let (t0, v0) = self.breakpoints[k - 1];
        let (t1, v1) = self.breakpoints[k];
        Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// Physical constants of the drive. Angular units throughout.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RydbergParams {
    /// Van der Waals coefficient, rad/us * um^6.
    pub c6: f64,
    pub omega_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl RydbergParams {
    pub fn from_linear_mhz(c6_mhz_um6: f64, omega_max_mhz: f64, delta_min_mhz: f64, delta_max_mhz: f64) -> Result<Self> {
        let p = Self {
            c6: mhz_to_angular(c6_mhz_um6),
            omega_max: mhz_to_angular(omega_max_mhz),
            delta_min: mhz_to_angular(delta_min_mhz),
            delta_max: mhz_to_angular(delta_max_mhz),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c6 > 0.0) {
            return Err(Error::InvalidParameter(format!("C6 must be positive, got {}", self.c6)));
        }
        if !(self.delta_max > self.delta_min) {
            return Err(Error::InvalidParameter("delta_max must exceed delta_min".into()));
        }
        if !(self.omega_max >= 0.0) {
            return Err(Error::InvalidParameter("omega_max must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for RydbergParams {
    /// C6/2pi = 862690 MHz um^6, Omega_max/2pi = 2.5 MHz, Delta/2pi from -2.5 to 4.0 MHz.
    fn default() -> Self {
        Self::from_linear_mhz(862_690.0, 2.5, -2.5, 4.0).expect("default parameters are valid")
    }
}

/// Named times of a protocol, in us.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMarkers {
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub hold_end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveProtocol {
    pub omega: Waveform,
    pub delta: Waveform,
    pub duration: f64,
    pub markers: ProtocolMarkers,
}

impl DriveProtocol {
    /// Builds a protocol from two waveforms that must both span `[0, duration]`.
    pub fn new(omega: Waveform, delta: Waveform, markers: ProtocolMarkers) -> Result<Self> {
        let duration = omega.end();
        if omega.start() != 0.0 || delta.start() != 0.0 || (delta.end() - duration).abs() > 1e-12 {
            return Err(Error::InvalidProtocol("omega and delta must both cover [0, duration]".into()));
        }
        Ok(Self { omega, delta, duration, markers })
    }

    /// Constant drive over `[0, duration]`; used for hold Hamiltonians and tests.
    pub fn constant(omega: f64, delta: f64, duration: f64) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::InvalidProtocol(format!("duration must be positive, got {duration}")));
        }
        Self::new(
            Waveform::new(vec![(0.0, omega), (duration, omega)])?,
            Waveform::new(vec![(0.0, delta), (duration, delta)])?,
            ProtocolMarkers { ramp_start: 0.0, ramp_end: 0.0, hold_end: None },
        )
    }

    pub fn omega_at(&self, t: f64) -> Result<f64> {
        self.omega.eval(t)
    }

    pub fn delta_at(&self, t: f64) -> Result<f64> {
        self.delta.eval(t)
    }

    /// Sorted union of the breakpoint times of both waveforms.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self
            .omega
            .breakpoints()
            .iter()
            .chain(self.delta.breakpoints())
            .map(|&(t, _)| t)
            .collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        ts
    }
}

/// Ramp protocol: Omega ramps up over `t_edge` at `delta_min`, detuning sweeps
/// linearly to `delta_max` over `t_delta`, then Omega ramps down over `t_edge`.
pub fn build_kz_protocol(t_delta: f64, params: &RydbergParams, t_edge: f64) -> Result<DriveProtocol> {
    build_hold_protocol(t_delta, 0.0, params, t_edge)
}

/// Ramp protocol with a constant `(omega_max, delta_max)` segment of length
/// `t_hold` inserted before the final ramp-down.
pub fn build_hold_protocol(t_delta: f64, t_hold: f64, params: &RydbergParams, t_edge: f64) -> Result<DriveProtocol> {
    if !(t_delta > 0.0) || !t_delta.is_finite() {
        return Err(Error::InvalidProtocol(format!("t_delta must be positive, got {t_delta}")));
    }
    if !(t_hold >= 0.0) || !t_hold.is_finite() {
        return Err(Error::InvalidProtocol(format!("t_hold must be non-negative, got {t_hold}")));
    }
    if !(t_edge > 0.0) {
        return Err(Error::InvalidProtocol(format!("t_edge must be positive, got {t_edge}")));
    }
    params.validate()?;
    let ramp_start = t_edge;
    let ramp_end = t_edge + t_delta;
    let hold_end = ramp_end + t_hold;
    let duration = hold_end + t_edge;

    let RydbergParams { omega_max, delta_min, delta_max, .. } = *params;
    let mut omega_pts = vec![(0.0, 0.0), (ramp_start, omega_max)];
    if hold_end > ramp_start {
        omega_pts.push((hold_end, omega_max));
    }
    omega_pts.push((duration, 0.0));
    let mut delta_pts = vec![(0.0, delta_min), (ramp_start, delta_min), (ramp_end, delta_max)];
    if t_hold > 0.0 {
        delta_pts.push((hold_end, delta_max));
    }
    delta_pts.push((duration, delta_max));

    DriveProtocol::new(
        Waveform::new(omega_pts)?,
        Waveform::new(delta_pts)?,
        ProtocolMarkers {
            ramp_start,
            ramp_end,
            hold_end: (t_hold > 0.0).then_some(hold_end),
        },
    )
}

/// Quench rate (Delta_max - Delta_min) / t_delta as a linear rate, MHz/us.
pub fn gamma_rate(t_delta: f64, params: &RydbergParams) -> Result<f64> {
    if !(t_delta > 0.0) {
        return Err(Error::InvalidParameter(format!("t_delta must be positive, got {t_delta}")));
    }
    Ok((params.delta_max - params.delta_min) / (2.0 * PI * t_delta))
}

/// Inverse of [`gamma_rate`]: ramp time (us) for a linear rate in MHz/us.
pub fn t_delta_for_gamma(gamma_mhz_per_us: f64, params: &RydbergParams) -> Result<f64> {
    if !(gamma_mhz_per_us > 0.0) {
        return Err(Error::InvalidParameter(format!("rate must be positive, got {gamma_mhz_per_us}")));
    }
    Ok((params.delta_max - params.delta_min) / (2.0 * PI * gamma_mhz_per_us))
}

/// Blockade radius `(C6 / Omega)^(1/6)` in um. Both arguments angular.
pub fn blockade_radius(c6: f64, omega: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::InvalidParameter(format!("omega must be positive, got {omega}")));
    }
    if !(c6 >= 0.0) {
        return Err(Error::InvalidParameter(format!("C6 must be non-negative, got {c6}")));
    }
    Ok((c6 / omega).powf(1.0 / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kz_protocol_shape() {
        let p = RydbergParams::default();
        let proto = build_kz_protocol(3.0, &p, 0.5).unwrap();
        assert_relative_eq!(proto.duration, 4.0);
        assert_relative_eq!(proto.delta_at(0.5).unwrap(), p.delta_min);
        assert_relative_eq!(proto.delta_at(3.5).unwrap(), p.delta_max);
        assert_relative_eq!(proto.delta_at(0.5 + 1.5).unwrap(), 0.5 * (p.delta_min + p.delta_max), epsilon = 1e-12);
        assert_eq!(proto.omega_at(0.0).unwrap(), 0.0);
        assert_eq!(proto.omega_at(4.0).unwrap(), 0.0);
        assert_relative_eq!(proto.omega_at(0.25).unwrap(), 0.5 * p.omega_max);
        assert_relative_eq!(proto.omega_at(2.0).unwrap(), p.omega_max);
        assert_relative_eq!(proto.delta_at(3.75).unwrap(), p.delta_max);

        let fast = build_kz_protocol(0.066, &p, 0.5).unwrap();
        assert_relative_eq!(fast.duration, 1.066, epsilon = 1e-12);
    }

    #[test]
    fn hold_protocol_segments() {
        let p = RydbergParams::default();
        assert_eq!(build_hold_protocol(3.0, 0.0, &p, 0.5).unwrap(), build_kz_protocol(3.0, &p, 0.5).unwrap());

        let proto = build_hold_protocol(2.0, 3.0, &p, 0.5).unwrap();
        assert_relative_eq!(proto.duration, 6.0);
        for k in 0..=30 {
            let t = 2.5 + 0.1 * k as f64;
            assert_relative_eq!(proto.delta_at(t).unwrap(), p.delta_max, epsilon = 1e-12);
            assert_relative_eq!(proto.omega_at(t).unwrap(), p.omega_max, epsilon = 1e-12);
        }
        assert_eq!(proto.omega_at(proto.duration).unwrap(), 0.0);
        assert_eq!(proto.markers.hold_end, Some(5.5));
        assert_eq!(proto.breakpoints(), vec![0.0, 0.5, 2.5, 5.5, 6.0]);
    }

    #[test]
    fn protocol_errors() {
        let p = RydbergParams::default();
        assert!(matches!(build_kz_protocol(0.0, &p, 0.5), Err(Error::InvalidProtocol(_))));
        assert!(matches!(build_kz_protocol(-1.0, &p, 0.5), Err(Error::InvalidProtocol(_))));
        assert!(build_hold_protocol(1.0, -0.1, &p, 0.5).is_err());
        let proto = build_kz_protocol(1.0, &p, 0.5).unwrap();
        assert!(matches!(proto.delta_at(2.5), Err(Error::OutOfDomain { .. })));
        assert!(proto.delta_at(-0.1).is_err());
    }

    #[test]
    fn waveform_rejects_unordered_times() {
        assert!(Waveform::new(vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
        assert!(Waveform::new(vec![(0.0, 1.0)]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let p = RydbergParams::default();
        assert_relative_eq!(gamma_rate(3.0, &p).unwrap(), 6.5 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(gamma_rate(0.1, &p).unwrap(), 65.0, epsilon = 1e-10);
        assert_relative_eq!(gamma_rate(1.5, &p).unwrap(), 2.0 * gamma_rate(3.0, &p).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(t_delta_for_gamma(65.0, &p).unwrap(), 0.1, epsilon = 1e-12);
        assert!(gamma_rate(0.0, &p).is_err());
    }

    #[test]
    fn blockade_radius_examples() {
        let p = RydbergParams::default();
        let rb = blockade_radius(p.c6, p.omega_max).unwrap();
        assert!((rb - 8.37).abs() < 0.01, "R_b = {rb}");
        assert!((rb / 6.2 - 1.35).abs() < 0.005, "R_b/a = {}", rb / 6.2);
        assert_relative_eq!(blockade_radius(p.c6, 64.0 * p.omega_max).unwrap(), 0.5 * rb, epsilon = 1e-12);
        assert_eq!(blockade_radius(0.0, 1.0).unwrap(), 0.0);
        assert!(blockade_radius(p.c6, 0.0).is_err());
    }
}
