//! Ramp sweep on a blockaded ring: defect mean, variance and anomaly ratio
//! against quench rate, plus the fitted correlation length.
//!
//! Usage: cargo run --release --example kz_sweep -- [L] [points]

use std::sync::Arc;

use kzchain::analysis::{
    anomaly_ratio, default_power_law_window, distance_to_even_poisson, fit_correlation_length, fit_power_law, CorrPoint,
    RatePoint,
};
use kzchain::basis::enumerate_basis;
use kzchain::evolve::{log_spaced_t_deltas, run_kz_sweep, IntegratorConfig};
use kzchain::geometry::{ring_positions, Boundary};
use kzchain::hamiltonian::build_hamiltonian;
use kzchain::protocol::{build_kz_protocol, RydbergParams};

fn main() -> kzchain::Result<()> {
    let mut args = std::env::args().skip(1);
    let l: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let points: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);

    let params = RydbergParams::default();
    let basis = Arc::new(enumerate_basis(l, Boundary::Periodic, true)?);
    let geom = ring_positions(l, 6.2)?;
    let h = build_hamiltonian(basis.clone(), &geom, &params, build_kz_protocol(1.0, &params, 0.5)?)?;
    let t_deltas = log_spaced_t_deltas(0.2, 100.0, points, &params)?;
    println!("L = {l}, dim = {}", basis.dim());
    println!(
        "{:>9} {:>9} {:>8} {:>8} {:>6} {:>7} {:>8} {:>8} {:>8}",
        "Gamma", "t_delta", "<D>", "var", "ratio", "TV", "xi", "CD(1)", "steps"
    );
    let mut xi_points = Vec::new();
    let start = std::time::Instant::now();
    for p in run_kz_sweep(&h, &t_deltas, 0.5, &IntegratorConfig::default()) {
        match p.result {
            Ok(o) => {
                let corr: Vec<CorrPoint> = o.density_corr.iter().enumerate().map(|(l, &v)| CorrPoint::exact(l, v)).collect();
                let xi = fit_correlation_length(&corr, (1.0, 6.0)).map_or(f64::NAN, |f| f.value("xi"));
                xi_points.push(RatePoint { gamma: p.gamma, value: xi, stderr: None });
                println!(
                    "{:9.3} {:9.4} {:8.4} {:8.4} {:6.3} {:7.4} {:8.4} {:8.4} {:8}",
                    p.gamma,
                    p.t_delta,
                    o.mean_d,
                    o.var_d,
                    anomaly_ratio(o.mean_d, o.var_d)?,
                    distance_to_even_poisson(&o.distribution.pmf, o.mean_d)?,
                    xi,
                    o.defect_corr[1],
                    o.diagnostics.steps
                )
            }
            Err(e) => println!("{:9.3} {:9.4} failed: {e}", p.gamma, p.t_delta),
        }
    }
    let gammas: Vec<f64> = xi_points.iter().map(|p| p.gamma).collect();
    if let Some(window) = default_power_law_window(&gammas) {
        match fit_power_law(&xi_points, window) {
            Ok(f) => println!("xi ~ Gamma^-mu over [{:.2}, {:.2}]: mu = {:.3} +- {:.3}", window.0, window.1, f.value("mu"), f.stderr("mu")),
            Err(e) => println!("power-law fit failed: {e}"),
        }
    }
    eprintln!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
