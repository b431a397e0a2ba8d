//! Connected density and domain-wall correlators after a slow and a fast
//! ramp, with their fitted decay lengths.
//!
//! Usage: cargo run --release --example defect_correlations -- [L] [t_delta...]

use std::sync::Arc;

use kzchain::analysis::{fit_correlation_length, CorrPoint};
use kzchain::basis::enumerate_basis;
use kzchain::evolve::{run_kz_point, IntegratorConfig};
use kzchain::geometry::{ring_positions, Boundary};
use kzchain::hamiltonian::build_hamiltonian;
use kzchain::protocol::{build_kz_protocol, gamma_rate, RydbergParams};

fn decay_length(c: &[f64]) -> String {
    let pts: Vec<CorrPoint> = c.iter().enumerate().map(|(l, &v)| CorrPoint::exact(l, v)).collect();
    match fit_correlation_length(&pts, (1.0, 6.0)) {
        Ok(f) => format!("{:.3} +- {:.3}", f.value("xi"), f.stderr("xi")),
        Err(e) => format!("n/a ({e})"),
    }
}

fn main() -> kzchain::Result<()> {
    let mut args = std::env::args().skip(1);
    let l: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let mut t_deltas: Vec<f64> = args.filter_map(|a| a.parse().ok()).collect();
    if t_deltas.is_empty() {
        t_deltas = vec![32.5, 0.065];
    }
    let params = RydbergParams::default();
    let basis = Arc::new(enumerate_basis(l, Boundary::Periodic, true)?);
    let geom = ring_positions(l, 6.2)?;
    let h = build_hamiltonian(basis, &geom, &params, build_kz_protocol(1.0, &params, 0.5)?)?;
    for t_delta in t_deltas {
        let o = run_kz_point(&h, t_delta, 0.5, &IntegratorConfig::default())?;
        println!("t_delta = {t_delta} us, Gamma = {:.3} MHz/us, <D> = {:.4}", gamma_rate(t_delta, &params)?, o.mean_d);
        println!("{:>3} {:>12} {:>12}", "l", "C_n(l)", "C_D(l)");
        for (k, (a, b)) in o.density_corr.iter().zip(&o.defect_corr).enumerate() {
            println!("{k:>3} {a:>12.4e} {b:>12.4e}");
        }
        println!("decay length: density {}, defect {}", decay_length(&o.density_corr), decay_length(&o.defect_corr));
    }
    Ok(())
}
