//! Programmatic campaign: a small sweep written to disk, then the fits
//! re-run from the CSV output.
//!
//! Usage: cargo run --release --example campaign -- [out_dir]

use std::path::PathBuf;

use kzchain::campaign::{cmd_fit, cmd_sweep, CampaignConfig, RateGrid, RunOptions, SystemConfig};

fn main() -> kzchain::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "kzchain-campaign".into()).into();
    let mut cfg = CampaignConfig::new(SystemConfig::with_sites(12));
    cfg.protocol.rate_grid = Some(RateGrid { gamma_min_MHz_per_us: 0.2, gamma_max_MHz_per_us: 100.0, points: 9 });
    cfg.seed = Some(1);
    println!("config sha256 {}", cfg.hash());
    let report = cmd_sweep(&cfg, &RunOptions { out: Some(out.clone()), ..Default::default() })?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    let (fit, _) = cmd_fit(&out, &cfg.analysis, &out.join("refit"))?;
    for r in &fit.ramps {
        println!("Gamma {:8.3}: xi {:7.3}, xi_defect {:7.3}", r.gamma_MHz_per_us, r.xi, r.xi_defect);
    }
    match (&fit.power_law, &fit.power_law_error) {
        (Some(p), _) => println!("mu = {:.3} +- {:.3}", p.value("mu"), p.stderr("mu")),
        (_, Some(e)) => println!("power law: {e}"),
        _ => {}
    }
    Ok(())
}
