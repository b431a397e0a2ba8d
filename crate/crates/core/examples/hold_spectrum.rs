//! Ramp into the ordered phase, hold the final Hamiltonian, and compare the
//! oscillation spectrum of the wall number with the spectral gap.
//!
//! Usage: cargo run --release --example hold_spectrum -- [L] [t_delta] [t_hold]

use std::sync::Arc;

use kzchain::analysis::{hold_spectrum, running_average_drift, spectral_gap, Detrend, GapSector, Taper};
use kzchain::basis::enumerate_basis;
use kzchain::evolve::{evolve_hold, uniform_times, HoldReadout, IntegratorConfig};
use kzchain::geometry::{ring_positions, Boundary};
use kzchain::hamiltonian::build_hamiltonian;
use kzchain::protocol::{build_hold_protocol, RydbergParams};

fn main() -> kzchain::Result<()> {
    let mut args = std::env::args().skip(1);
    let l: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let t_delta: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let t_hold: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3.0);
    let readout = match args.next().as_deref() {
        Some("during") => HoldReadout::DuringHold,
        _ => HoldReadout::AfterRampDown,
    };

    let params = RydbergParams::default();
    let basis = Arc::new(enumerate_basis(l, Boundary::Periodic, true)?);
    let geom = ring_positions(l, 6.2)?;
    let protocol = build_hold_protocol(t_delta, t_hold, &params, 0.5)?;
    let (start, end) = (protocol.markers.ramp_end, protocol.markers.hold_end.unwrap_or(protocol.markers.ramp_end));
    let h = build_hamiltonian(basis, &geom, &params, protocol)?;

    let dt = 0.01;
    let times = uniform_times(start, end, (t_hold / dt).round() as usize + 1);
    let traj = evolve_hold(&h, &IntegratorConfig::default(), &times, readout)?;
    let walls: Vec<f64> = traj.snapshots.iter().map(|s| s.mean_d).collect();
    let xi: Vec<f64> = traj.snapshots.iter().map(|s| s.xi).collect();
    let window = (1.0 / dt).round() as usize;
    println!("L = {l}, t_delta = {t_delta} us, hold {t_hold} us");
    println!("<D> from {:.4} to {:.4}, running-average drift {:.4}", walls[0], walls[walls.len() - 1], running_average_drift(&walls, window)?);
    println!("xi  from {:.4} to {:.4}, running-average drift {:.4}", xi[0], xi[xi.len() - 1], running_average_drift(&xi, window)?);

    let gap = spectral_gap(&h, params.omega_max, params.delta_max, GapSector::Symmetric)?;
    let series: Vec<(f64, f64)> = traj.snapshots.iter().map(|s| (s.t, s.mean_d)).collect();
    let spec = hold_spectrum(&series, Detrend::Mean, Taper::Rectangular)?;
    println!("gap nu = {:.4} MHz (symmetric sector), resolution {:.4} MHz", gap.nu, spec.resolution);
    println!("peak {:.4} MHz, sub-gap weight {:.4}", spec.peak_frequency, spec.sub_gap_weight(gap.nu));
    let full = spectral_gap(&h, params.omega_max, params.delta_max, GapSector::Full)?;
    println!("full-basis gap nu = {:.3e} MHz", full.nu);
    for (f, m) in spec.frequencies.iter().zip(&spec.magnitudes).take(16) {
        println!("{f:8.4} {m:10.3e}");
    }
    Ok(())
}
