//! Blockade basis sizes against the Lucas/Fibonacci counts, and the cost of
//! one Hamiltonian application.
//!
//! Usage: cargo run --release --example basis_enumeration -- [L_max]

use std::sync::Arc;
use std::time::Instant;

use kzchain::basis::{enumerate_basis, predicted_dim};
use kzchain::geometry::{ring_positions, Boundary};
use kzchain::hamiltonian::build_hamiltonian;
use kzchain::protocol::{DriveProtocol, RydbergParams};
use num_complex::Complex64;

fn main() -> kzchain::Result<()> {
    let l_max: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(24);
    let params = RydbergParams::default();
    println!("{:>3} {:>10} {:>10} {:>10} {:>12}", "L", "ring", "chain", "full", "H psi (ms)");
    for l in (4..=l_max).step_by(2) {
        let ring = Arc::new(enumerate_basis(l, Boundary::Periodic, true)?);
        let chain = enumerate_basis(l, Boundary::Open, true)?;
        assert_eq!(ring.dim() as u128, predicted_dim(l, Boundary::Periodic, true));
        let h = build_hamiltonian(
            ring.clone(),
            &ring_positions(l, 6.2)?,
            &params,
            DriveProtocol::constant(params.omega_max, params.delta_max, 1.0)?,
        )?;
        let psi = vec![Complex64::new(1.0 / (ring.dim() as f64).sqrt(), 0.0); ring.dim()];
        let mut out = vec![Complex64::default(); ring.dim()];
        let reps = 20;
        let start = Instant::now();
        for _ in 0..reps {
            h.apply_fixed(params.omega_max, params.delta_max, &psi, &mut out);
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        println!("{l:>3} {:>10} {:>10} {:>10} {ms:>12.3}", ring.dim(), chain.dim(), predicted_dim(l, Boundary::Periodic, false));
    }
    Ok(())
}
