use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kzchain::campaign::{
    cmd_compare_space, cmd_fit, cmd_hold, cmd_mitigate, cmd_sample, cmd_sweep, exit_code, load_calibration,
    AnalysisConfig, CampaignConfig, CommandReport, RunOptions,
};

#[derive(Parser)]
#[command(name = "kzchain", version, about = "Kibble-Zurek defect statistics for Rydberg chains")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Campaign configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides KZCHAIN_WORKERS and the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Ramp sweep over t_delta.
    Sweep,
    /// Hold at the final Hamiltonian and record the freeze-out series.
    Hold,
    /// Zero-noise extrapolation of wall moments from a shot file.
    Mitigate {
        #[arg(long)]
        shots: PathBuf,
        /// Calibration JSON {eps10, d_eps10, eps01, d_eps01}.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Also report the confusion-matrix-inversion mean.
        #[arg(long)]
        baseline: bool,
    },
    /// Same sweep in the blockade subspace and the full space.
    CompareSpace,
    /// Re-run fits on the CSVs of an earlier sweep.
    Fit {
        /// Directory holding correlators.csv; defaults to --out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Emit a shot file from a saved state.
    Sample {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        shots: u64,
        /// Apply this readout calibration to the shots.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> kzchain::Result<CommandReport> {
    let opts = RunOptions { seed: cli.common.seed, workers: cli.common.workers, out: cli.common.out.clone() };
    let config = cli.common.config.as_deref().map(CampaignConfig::load).transpose()?;
    let need = |c: Option<CampaignConfig>| c.ok_or_else(|| kzchain::Error::Config("--config is required".into()));
    let out = || opts.out.clone().or_else(|| config.as_ref().and_then(|c| c.output_dir.clone())).unwrap_or_else(|| "kzchain-out".into());
    match cli.command {
        Command::Sweep => cmd_sweep(&need(config)?, &opts),
        Command::Hold => cmd_hold(&need(config)?, &opts),
        Command::CompareSpace => cmd_compare_space(&need(config)?, &opts),
        Command::Mitigate { shots, calibration, baseline } => {
            let (report, files) = cmd_mitigate(&shots, calibration.as_deref(), config.as_ref(), &opts, baseline)?;
            println!(
                "wall mean {:.5} +- {:.5} (stat) +- {:.5} (sys), raw {:.5}",
                report.wall_mean.value, report.wall_mean.stat_err, report.wall_mean.sys_err, report.raw.mean
            );
            println!(
                "wall var  {:.5} +- {:.5} (stat) +- {:.5} (sys), raw {:.5}",
                report.wall_var.value, report.wall_var.stat_err, report.wall_var.sys_err, report.raw.var
            );
            if let Some(b) = report.baseline_mean {
                println!("confusion-inverse mean {:.5} +- {:.5}", b.value, b.stat_err);
            }
            Ok(files)
        }
        Command::Fit { input } => {
            let analysis = config.as_ref().map(|c| c.analysis.clone()).unwrap_or_else(AnalysisConfig::default);
            let dir = out();
            let (fit, report) = cmd_fit(input.as_deref().unwrap_or(&dir), &analysis, &dir)?;
            if let Some(p) = &fit.power_law {
                println!("mu = {:.4} +- {:.4} over {:?}", p.value("mu"), p.stderr("mu"), p.window);
            }
            Ok(report)
        }
        Command::Sample { state, shots, calibration } => {
            let seed = opts.seed.or(config.as_ref().and_then(|c| c.seed)).ok_or_else(|| kzchain::Error::Config("sampling needs --seed".into()))?;
            let model = calibration.as_deref().map(load_calibration).transpose()?;
            cmd_sample(&state, shots, seed, model.as_ref(), &out())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(report) => {
            for f in &report.files {
                log::info!("wrote {}", f.display());
            }
            for f in &report.failures {
                log::error!("{f}");
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
