//! Defect statistics of the same ramps in the blockade subspace and in the
//! full 2^L space.
//!
//! Usage: cargo run --release --example subspace_comparison -- [L] [points]

use kzchain::campaign::SystemConfig;
use kzchain::evolve::{log_spaced_t_deltas, run_kz_sweep, IntegratorConfig};
use kzchain::protocol::{build_kz_protocol, RydbergParams};

fn main() -> kzchain::Result<()> {
    let mut args = std::env::args().skip(1);
    let l: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let points: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let params = RydbergParams::default();
    let t_deltas = log_spaced_t_deltas(0.2, 100.0, points, &params)?;
    let mut runs = Vec::new();
    for constrained in [true, false] {
        let sys = SystemConfig { constrained, ..SystemConfig::with_sites(l) };
        let h = sys.hamiltonian(build_kz_protocol(1.0, &params, 0.5)?)?;
        println!("{} space: dim {}", if constrained { "blockade" } else { "full" }, h.dim());
        runs.push(run_kz_sweep(&h, &t_deltas, 0.5, &IntegratorConfig::default()));
    }
    println!("{:>9} {:>9} {:>9} {:>9} {:>9}", "Gamma", "<D> bl", "var bl", "<D> full", "var full");
    for (c, f) in runs[0].iter().zip(&runs[1]) {
        match (&c.result, &f.result) {
            (Ok(c_obs), Ok(f_obs)) => println!(
                "{:9.3} {:9.4} {:9.4} {:9.4} {:9.4}",
                c.gamma, c_obs.mean_d, c_obs.var_d, f_obs.mean_d, f_obs.var_d
            ),
            (a, b) => println!("{:9.3} failed: {:?} {:?}", c.gamma, a.as_ref().err(), b.as_ref().err()),
        }
    }
    Ok(())
}
