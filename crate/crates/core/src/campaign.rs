//! Campaign configuration and the commands behind the `kzchain` binary.
//!
//! Every command validates its whole configuration before creating any
//! output, runs sweep points on a fixed-size worker pool and writes results
//! from a single collector in input order. Tabular files start with a
//! `# kzchain <version> config_sha256=<hash>` line; JSON files carry the same
//! data under `"meta"`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    anomaly_ratio, default_power_law_window, distance_to_even_poisson, fit_correlation_length, fit_power_law,
    hold_spectrum, running_average_drift, spectral_gap, CorrPoint, Detrend, FitResult, GapSector, RatePoint, Taper,
};
use crate::basis::enumerate_basis;
use crate::error::{Error, Result};
use crate::evolve::{evolve_hold, run_kz_point_with_state, HoldReadout, IntegratorConfig, QuantumState, SweepObservables};
use crate::geometry::{chain_positions, ring_positions, AtomGeometry, Boundary};
use crate::hamiltonian::{build_hamiltonian_with, HamiltonianOptions, RingDistance, RydbergHamiltonian};
use crate::mitigation::{
    apply_readout_noise, confusion_inverse_mean, zne_with_systematics, CorrectedMean, FitOrder, ReadoutModel,
    SystematicVariants, WallObservable, ZneGrid, ZneResult,
};
use crate::observables::{estimate_moments, read_shot_file, sample_bitstrings, write_shot_file, MomentEstimate, ShotMetadata};
use crate::protocol::{build_hold_protocol, build_kz_protocol, gamma_rate, t_delta_for_gamma, DriveProtocol, RydbergParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default worker count, overridden by `--workers`.
pub const WORKERS_ENV: &str = "KZCHAIN_WORKERS";

/// Largest chain run in the full `2^L` space by `compare-space`.
pub const MAX_FULL_SPACE_SITES: usize = 16;

fn default_a() -> f64 {
    6.2
}
fn default_boundary() -> Boundary {
    Boundary::Periodic
}
fn default_true() -> bool {
    true
}
fn default_c6() -> f64 {
    862_690.0
}
fn default_omega() -> f64 {
    2.5
}
fn default_delta_min() -> f64 {
    -2.5
}
fn default_delta_max() -> f64 {
    4.0
}
fn default_t_edge() -> f64 {
    0.5
}

/// Chain geometry and drive parameters; frequencies in linear MHz.
#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub L: usize,
    #[serde(default = "default_a")]
    pub a_um: f64,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
    #[serde(default = "default_true")]
    pub constrained: bool,
    #[serde(default = "default_c6")]
    pub C6_over_2pi_MHz_um6: f64,
    #[serde(default = "default_omega")]
    pub omega_max_over_2pi_MHz: f64,
    #[serde(default = "default_delta_min")]
    pub delta_min_over_2pi_MHz: f64,
    #[serde(default = "default_delta_max")]
    pub delta_max_over_2pi_MHz: f64,
    #[serde(default)]
    pub t_delta_us: Option<f64>,
    #[serde(default)]
    pub t_hold_us: Option<f64>,
    #[serde(default = "default_t_edge")]
    pub t_edge_us: f64,
    #[serde(default)]
    pub cutoff_um: Option<f64>,
    #[serde(default)]
    pub ring_distance: RingDistance,
    /// Explicit atom positions, overriding the ring/chain layout.
    #[serde(default)]
    pub geometry_file: Option<PathBuf>,
}

impl SystemConfig {
    pub fn with_sites(n_sites: usize) -> Self {
        Self {
            L: n_sites,
            a_um: default_a(),
            boundary: default_boundary(),
            constrained: true,
            C6_over_2pi_MHz_um6: default_c6(),
            omega_max_over_2pi_MHz: default_omega(),
            delta_min_over_2pi_MHz: default_delta_min(),
            delta_max_over_2pi_MHz: default_delta_max(),
            t_delta_us: None,
            t_hold_us: None,
            t_edge_us: default_t_edge(),
            cutoff_um: None,
            ring_distance: RingDistance::Chord,
            geometry_file: None,
        }
    }

    pub fn params(&self) -> Result<RydbergParams> {
        RydbergParams::from_linear_mhz(
            self.C6_over_2pi_MHz_um6,
            self.omega_max_over_2pi_MHz,
            self.delta_min_over_2pi_MHz,
            self.delta_max_over_2pi_MHz,
        )
    }

    pub fn geometry(&self) -> Result<AtomGeometry> {
        match &self.geometry_file {
            Some(path) => {
                let g = AtomGeometry::load(path)?;
                if g.len() != self.L {
                    return Err(Error::Config(format!("{} holds {} atoms, L = {}", path.display(), g.len(), self.L)));
                }
                if g.boundary != self.boundary {
                    return Err(Error::Config(format!("{} boundary differs from the system block", path.display())));
                }
                Ok(g)
            }
            None => match self.boundary {
                Boundary::Periodic => ring_positions(self.L, self.a_um),
                Boundary::Open => chain_positions(self.L, self.a_um),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.L == 0 {
            return Err(Error::Config("L must be positive".into()));
        }
        if !(self.t_edge_us > 0.0) {
            return Err(Error::Config(format!("t_edge_us must be positive, got {}", self.t_edge_us)));
        }
        if let Some(rc) = self.cutoff_um {
            if !(rc > 0.0) {
                return Err(Error::Config(format!("cutoff_um must be positive, got {rc}")));
            }
        }
        self.params()?;
        Ok(())
    }

    /// Builds the basis and Hamiltonian for `protocol`.
    pub fn hamiltonian(&self, protocol: DriveProtocol) -> Result<RydbergHamiltonian> {
        let basis = Arc::new(enumerate_basis(self.L, self.boundary, self.constrained)?);
        let options = HamiltonianOptions { cutoff_um: self.cutoff_um, ring_distance: self.ring_distance };
        build_hamiltonian_with(basis, &self.geometry()?, &self.params()?, protocol, options)
    }
}

#[allow(non_snake_case)]
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateGrid {
    pub gamma_min_MHz_per_us: f64,
    pub gamma_max_MHz_per_us: f64,
    pub points: usize,
}

fn default_interval() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldConfig {
    /// Ramp time before the hold; falls back to the system block.
    #[serde(default)]
    pub t_delta_us: Option<f64>,
    /// Hold window; falls back to the system block.
    #[serde(default)]
    pub t_hold_us: Option<f64>,
    #[serde(default = "default_interval")]
    pub sample_interval_us: f64,
    #[serde(default)]
    pub readout: HoldReadout,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Explicit ramp times; takes precedence over `rate_grid`.
    #[serde(default)]
    pub t_delta_us: Option<Vec<f64>>,
    #[serde(default)]
    pub rate_grid: Option<RateGrid>,
    #[serde(default)]
    pub hold: Option<HoldConfig>,
}

fn default_xi_window() -> (f64, f64) {
    crate::evolve::XI_WINDOW
}
fn default_drift_window() -> f64 {
    1.0
}
fn default_detrend() -> Detrend {
    Detrend::Mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Displacements used for correlation-length fits.
    #[serde(default = "default_xi_window")]
    pub xi_window: (f64, f64),
    /// Rate window of the power-law fit, MHz/us; middle log-third when absent.
    #[serde(default)]
    pub mu_window: Option<(f64, f64)>,
    #[serde(default = "default_detrend")]
    pub detrend: Detrend,
    #[serde(default)]
    pub taper: Taper,
    #[serde(default)]
    pub gap_sector: GapSector,
    /// Moving-average window for hold drift, us.
    #[serde(default = "default_drift_window")]
    pub drift_window_us: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            xi_window: default_xi_window(),
            mu_window: None,
            detrend: default_detrend(),
            taper: Taper::default(),
            gap_sector: GapSector::default(),
            drift_window_us: default_drift_window(),
        }
    }
}

fn default_mean_order() -> FitOrder {
    FitOrder::Linear
}
fn default_var_order() -> FitOrder {
    FitOrder::Quadratic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitigationConfig {
    #[serde(default)]
    pub calibration: Option<ReadoutModel>,
    #[serde(default)]
    pub calibration_file: Option<PathBuf>,
    #[serde(default)]
    pub grid: ZneGrid,
    #[serde(default = "default_mean_order")]
    pub mean_order: FitOrder,
    #[serde(default = "default_var_order")]
    pub var_order: FitOrder,
    #[serde(default)]
    pub variants: SystematicVariants,
    #[serde(default)]
    pub baseline: bool,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            calibration: None,
            calibration_file: None,
            grid: ZneGrid::default(),
            mean_order: default_mean_order(),
            var_order: default_var_order(),
            variants: SystematicVariants::default(),
            baseline: false,
        }
    }
}

impl MitigationConfig {
    pub fn model(&self) -> Result<ReadoutModel> {
        match (&self.calibration, &self.calibration_file) {
            (Some(_), Some(_)) => Err(Error::Config("give either calibration or calibration_file, not both".into())),
            (Some(m), None) => {
                m.validate()?;
                Ok(*m)
            }
            (None, Some(p)) => load_calibration(p),
            (None, None) => Ok(ReadoutModel::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub mitigation: Option<MitigationConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Dump every final ramp state next to the sweep results.
    #[serde(default)]
    pub save_states: bool,
}

impl CampaignConfig {
    pub fn new(system: SystemConfig) -> Self {
        Self {
            system,
            protocol: ProtocolConfig::default(),
            integrator: IntegratorConfig::default(),
            analysis: AnalysisConfig::default(),
            mitigation: None,
            output_dir: None,
            seed: None,
            workers: None,
            save_states: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.integrator.validate().map_err(|e| Error::Config(e.to_string()))?;
        let (lo, hi) = self.analysis.xi_window;
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::Config(format!("bad xi_window [{lo}, {hi}]")));
        }
        if let Some((lo, hi)) = self.analysis.mu_window {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config(format!("bad mu_window [{lo}, {hi}]")));
            }
        }
        if !(self.analysis.drift_window_us > 0.0) {
            return Err(Error::Config("drift_window_us must be positive".into()));
        }
        if let Some(m) = &self.mitigation {
            m.model()?;
            m.grid.validate()?;
            if self.seed.is_none() {
                return Err(Error::Config("a seed is required when mitigation is configured".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration, ignoring settings that cannot change
    /// results (worker count, output directory).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.output_dir = None;
        hex_sha256(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// Ramp times of a sweep, in input order.
    pub fn t_deltas(&self) -> Result<Vec<f64>> {
        let params = self.system.params()?;
        let list = match (&self.protocol.t_delta_us, &self.protocol.rate_grid, self.system.t_delta_us) {
            (Some(list), _, _) => list.clone(),
            (None, Some(g), _) => {
                if g.points == 0 {
                    return Err(Error::Config("rate_grid.points must be positive".into()));
                }
                crate::evolve::log_spaced_t_deltas(g.gamma_min_MHz_per_us, g.gamma_max_MHz_per_us, g.points, &params)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            (None, None, Some(t)) => vec![t],
            (None, None, None) => Vec::new(),
        };
        if list.is_empty() {
            return Err(Error::Config("the sweep has no ramp times".into()));
        }
        if let Some(t) = list.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("ramp times must be positive, got {t}")));
        }
        Ok(list)
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Reads a readout calibration `{eps10, d_eps10, eps01, d_eps01}`; schema
/// errors name the offending field.
pub fn load_calibration(path: &Path) -> Result<ReadoutModel> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Strict {
        eps10: f64,
        d_eps10: f64,
        eps01: f64,
        d_eps01: f64,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let s: Strict = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ReadoutModel::new(s.eps10, s.eps01, s.d_eps10, s.d_eps01).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunOptions {
    fn apply(&self, cfg: &CampaignConfig) -> CampaignConfig {
        let mut c = cfg.clone();
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if self.out.is_some() {
            c.output_dir = self.out.clone();
        }
        c
    }
}

/// Worker count: flag, then the environment, then the config, then all cores.
pub fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            Some(v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a count")))?)
        }
        _ => None,
    };
    let n = flag
        .or(env)
        .or(config)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    Ok(n)
}

fn pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

/// Process exit code for an error: 2 for configuration or input problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Json(_)
        | Error::InvalidGeometry(_)
        | Error::InvalidParameter(_)
        | Error::InvalidProtocol(_)
        | Error::InvalidGrid(_)
        | Error::InvalidModel(_)
        | Error::Capacity(_)
        | Error::Parse { .. } => 2,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub config_sha256: String,
}

impl Meta {
    fn new(hash: String) -> Self {
        Self { version: VERSION.into(), config_sha256: hash }
    }

    fn csv_line(&self) -> String {
        format!("# kzchain {} config_sha256={}", self.version, self.config_sha256)
    }
}

/// Files written and per-point failures of one command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandReport {
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

impl CommandReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

fn output_dir(cfg: &CampaignConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("kzchain-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_csv(path: &Path, meta: &Meta, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", meta.csv_line())?;
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// Correlation length from a correlator table, `NaN`s when no decay can be fitted.
fn corr_length(values: &[f64], window: (f64, f64)) -> (f64, f64) {
    let pts: Vec<CorrPoint> = values.iter().enumerate().map(|(l, &v)| CorrPoint::exact(l, v)).collect();
    fit_correlation_length(&pts, window).map_or((f64::NAN, f64::NAN), |f| (f.value("xi"), f.stderr("xi")))
}

/// Per-ramp fitted lengths and the power-law fit of `xi(Gamma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFit {
    pub meta: Meta,
    pub xi_window: (f64, f64),
    pub ramps: Vec<RampFit>,
    pub mu_window: Option<(f64, f64)>,
    pub power_law: Option<FitResult>,
    pub power_law_error: Option<String>,
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampFit {
    pub t_delta_us: f64,
    pub gamma_MHz_per_us: f64,
    pub xi: f64,
    pub xi_err: f64,
    /// Decay length of `|C_D(l)|`.
    pub xi_defect: f64,
    pub xi_defect_err: f64,
}

/// Correlators of one ramp, `l = 0..`.
#[derive(Clone, Debug, PartialEq)]
pub struct RampCorrelators {
    pub t_delta: f64,
    pub gamma: f64,
    pub density: Vec<f64>,
    pub defect: Vec<f64>,
}

/// Fits every ramp's correlation lengths and the power law in `Gamma`.
pub fn fit_sweep(meta: Meta, ramps: &[RampCorrelators], analysis: &AnalysisConfig) -> SweepFit {
    let fits: Vec<RampFit> = ramps
        .iter()
        .map(|r| {
            let (xi, xi_err) = corr_length(&r.density, analysis.xi_window);
            let (xi_defect, xi_defect_err) = corr_length(&r.defect, analysis.xi_window);
            RampFit { t_delta_us: r.t_delta, gamma_MHz_per_us: r.gamma, xi, xi_err, xi_defect, xi_defect_err }
        })
        .collect();
    let gammas: Vec<f64> = fits.iter().map(|f| f.gamma_MHz_per_us).collect();
    let mu_window = analysis.mu_window.or_else(|| default_power_law_window(&gammas));
    let points: Vec<RatePoint> = fits
        .iter()
        .filter(|f| f.xi.is_finite())
        .map(|f| RatePoint { gamma: f.gamma_MHz_per_us, value: f.xi, stderr: None })
        .collect();
    let (power_law, power_law_error) = match mu_window {
        Some(w) => match fit_power_law(&points, w) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, Some("fewer than two distinct rates".into())),
    };
    SweepFit { meta, xi_window: analysis.xi_window, ramps: fits, mu_window, power_law, power_law_error }
}

fn in_window(g: f64, w: Option<(f64, f64)>) -> bool {
    w.is_some_and(|(lo, hi)| g >= lo && g <= hi)
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, Serialize)]
struct RampDistribution {
    t_delta_us: f64,
    gamma_MHz_per_us: f64,
    mean: f64,
    variance: f64,
    odd_mass: f64,
    pmf: Vec<f64>,
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, Serialize)]
struct ManifestEntry {
    t_delta_us: f64,
    gamma_MHz_per_us: f64,
    status: &'static str,
    error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
struct Manifest<'a> {
    meta: &'a Meta,
    command: &'static str,
    points: Vec<ManifestEntry>,
    files: Vec<PathBuf>,
}

struct RampOutcome {
    t_delta: f64,
    gamma: f64,
    result: Result<(SweepObservables, QuantumState)>,
}

fn run_ramps(cfg: &CampaignConfig, system: &SystemConfig, t_deltas: &[f64]) -> Result<Vec<RampOutcome>> {
    let params = system.params()?;
    let h = system.hamiltonian(build_kz_protocol(t_deltas[0], &params, system.t_edge_us)?)?;
    let workers = resolve_workers(cfg.workers, None)?;
    log::info!("{} ramps on {workers} worker(s), L = {}, dim = {}", t_deltas.len(), system.L, h.dim());
    Ok(pool(workers)?.install(|| {
        t_deltas
            .par_iter()
            .map(|&t_delta| {
                let result = run_kz_point_with_state(&h, t_delta, system.t_edge_us, &cfg.integrator);
                match &result {
                    Ok(_) => log::info!("ramp t_delta = {t_delta} us done"),
                    Err(e) => log::warn!("ramp t_delta = {t_delta} us failed: {e}"),
                }
                RampOutcome { t_delta, gamma: gamma_rate(t_delta, &params).unwrap_or(f64::NAN), result }
            })
            .collect()
    }))
}

fn manifest_entries(outcomes: &[RampOutcome]) -> (Vec<ManifestEntry>, Vec<String>) {
    let mut failures = Vec::new();
    let entries = outcomes
        .iter()
        .map(|o| {
            let error = o.result.as_ref().err().map(|e| e.to_string());
            if let Some(e) = &error {
                failures.push(format!("t_delta = {} us: {e}", o.t_delta));
            }
            ManifestEntry {
                t_delta_us: o.t_delta,
                gamma_MHz_per_us: o.gamma,
                status: if error.is_none() { "ok" } else { "failed" },
                error,
            }
        })
        .collect();
    (entries, failures)
}

/// Ramp sweep: `sweep.csv`, `distributions.json`, `correlators.csv`,
/// `fit.json` and `manifest.json`.
pub fn cmd_sweep(cfg: &CampaignConfig, opts: &RunOptions) -> Result<CommandReport> {
    let cfg = opts.apply(cfg);
    cfg.validate()?;
    let t_deltas = cfg.t_deltas()?;
    let meta = Meta::new(cfg.hash());
    let outcomes = run_ramps(&cfg, &cfg.system, &t_deltas)?;
    let dir = output_dir(&cfg)?;

    let ok: Vec<(&RampOutcome, &SweepObservables, &QuantumState)> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().map(|(obs, psi)| (o, obs, psi)))
        .collect();
    let ramps: Vec<RampCorrelators> = ok
        .iter()
        .map(|(o, obs, _)| RampCorrelators {
            t_delta: o.t_delta,
            gamma: o.gamma,
            density: obs.density_corr.clone(),
            defect: obs.defect_corr.clone(),
        })
        .collect();
    let fit = fit_sweep(meta.clone(), &ramps, &cfg.analysis);

    let mut rows = Vec::new();
    for ((o, obs, _), f) in ok.iter().zip(&fit.ramps) {
        let ratio = anomaly_ratio(obs.mean_d, obs.var_d).unwrap_or(f64::NAN);
        let tv = distance_to_even_poisson(&obs.distribution.pmf, obs.mean_d).unwrap_or(f64::NAN);
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{:e},{},{:e}",
            o.gamma,
            o.t_delta,
            obs.mean_d,
            obs.var_d,
            ratio,
            f.xi,
            f.xi_err,
            in_window(o.gamma, fit.mu_window) as u8,
            tv,
            obs.distribution.odd_mass(),
            obs.diagnostics.steps,
            obs.diagnostics.max_norm_drift
        ));
    }
    let mut files = Vec::new();
    let p = dir.join("sweep.csv");
    write_csv(
        &p,
        &meta,
        "gamma_MHz_per_us,t_delta_us,mean_D,var_D,ratio,xi,xi_err,in_mu_window,tv_even_poisson,odd_mass,steps,norm_drift",
        &rows,
    )?;
    files.push(p);

    let dists: Vec<RampDistribution> = ok
        .iter()
        .map(|(o, obs, _)| RampDistribution {
            t_delta_us: o.t_delta,
            gamma_MHz_per_us: o.gamma,
            mean: obs.mean_d,
            variance: obs.var_d,
            odd_mass: obs.distribution.odd_mass(),
            pmf: obs.distribution.pmf.clone(),
        })
        .collect();
    let p = dir.join("distributions.json");
    write_json(&p, &serde_json::json!({ "meta": meta, "ramps": dists }))?;
    files.push(p);

    let mut rows = Vec::new();
    for r in &ramps {
        for (l, (d, c)) in r.density.iter().zip(&r.defect).enumerate() {
            rows.push(format!("{},{},{l},{d},{c}", r.t_delta, r.gamma));
        }
    }
    let p = dir.join("correlators.csv");
    write_csv(&p, &meta, "t_delta_us,gamma_MHz_per_us,l,density,defect", &rows)?;
    files.push(p);

    let p = dir.join("fit.json");
    write_json(&p, &fit)?;
    files.push(p);

    if cfg.save_states {
        for (i, (o, _, psi)) in ok.iter().enumerate() {
            let p = dir.join(format!("state_{i:03}.bin"));
            psi.save(
                &p,
                serde_json::json!({ "t_delta_us": o.t_delta, "gamma_MHz_per_us": o.gamma, "meta": meta }),
            )?;
            files.push(p);
        }
    }

    let (points, mut failures) = manifest_entries(&outcomes);
    failures.extend(fit.power_law_error.iter().map(|e| format!("power law: {e}")));
    let p = dir.join("manifest.json");
    files.push(p.clone());
    write_json(&p, &Manifest { meta: &meta, command: "sweep", points, files: files.clone() })?;
    Ok(CommandReport { files, failures })
}

/// Hold run: `hold.csv` and `spectrum.json`.
pub fn cmd_hold(cfg: &CampaignConfig, opts: &RunOptions) -> Result<CommandReport> {
    let cfg = opts.apply(cfg);
    cfg.validate()?;
    let hold = cfg.protocol.hold.clone().ok_or_else(|| Error::Config("protocol.hold is not configured".into()))?;
    let t_delta = hold
        .t_delta_us
        .or(cfg.system.t_delta_us)
        .ok_or_else(|| Error::Config("hold needs t_delta_us".into()))?;
    let t_hold = hold
        .t_hold_us
        .or(cfg.system.t_hold_us)
        .ok_or_else(|| Error::Config("hold needs t_hold_us".into()))?;
    let dt = hold.sample_interval_us;
    if !(t_delta > 0.0) || !(t_hold > 0.0) {
        return Err(Error::Config(format!("hold needs positive t_delta ({t_delta}) and t_hold ({t_hold})")));
    }
    if !(dt > 0.0) || dt > t_hold {
        return Err(Error::Config(format!("sample interval {dt} us must lie in (0, {t_hold}] us")));
    }
    let meta = Meta::new(cfg.hash());
    let params = cfg.system.params()?;
    let protocol = build_hold_protocol(t_delta, t_hold, &params, cfg.system.t_edge_us)?;
    let start = protocol.markers.ramp_end;
    let n = (t_hold / dt + 1e-9).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| start + k as f64 * dt).collect();
    let h = cfg.system.hamiltonian(protocol)?;
    let workers = resolve_workers(cfg.workers, None)?;
    log::info!("hold of {t_hold} us after t_delta = {t_delta} us, {n} samples");
    let (traj, gap) = pool(workers)?.install(|| -> Result<_> {
        let (traj, gap) = rayon::join(
            || evolve_hold(&h, &cfg.integrator, &times, hold.readout),
            || spectral_gap(&h, params.omega_max, params.delta_max, cfg.analysis.gap_sector),
        );
        Ok((traj?, gap?))
    })?;
    let dir = output_dir(&cfg)?;

    let rows: Vec<String> = traj
        .snapshots
        .iter()
        .map(|s| format!("{},{},{},{},{},{},{:e}", s.t, s.t - start, s.mean_d, s.var_d, s.xi, s.energy, s.norm_drift))
        .collect();
    let mut files = Vec::new();
    let p = dir.join("hold.csv");
    write_csv(&p, &meta, "t_us,t_hold_us,mean_D,var_D,xi,energy,norm_drift", &rows)?;
    files.push(p);

    let walls: Vec<f64> = traj.snapshots.iter().map(|s| s.mean_d).collect();
    let xi: Vec<f64> = traj.snapshots.iter().map(|s| s.xi).collect();
    let window = ((cfg.analysis.drift_window_us / dt).round() as usize).clamp(1, n);
    let series: Vec<(f64, f64)> = traj.snapshots.iter().map(|s| (s.t, s.mean_d)).collect();
    let mut failures = Vec::new();
    let spectrum = match hold_spectrum(&series, cfg.analysis.detrend, cfg.analysis.taper) {
        Ok(mut s) => {
            s.gap_frequency = Some(gap.nu);
            Some(s)
        }
        Err(e) => {
            failures.push(format!("spectrum: {e}"));
            None
        }
    };
    let drift = |v: &[f64]| running_average_drift(v, window).ok();
    let p = dir.join("spectrum.json");
    write_json(
        &p,
        &serde_json::json!({
            "meta": meta,
            "series": "mean_D",
            "t_delta_us": t_delta,
            "t_hold_us": t_hold,
            "sample_interval_us": dt,
            "readout": hold.readout,
            "gap_sector": cfg.analysis.gap_sector,
            "nu_gap_MHz": gap.nu,
            "sub_gap_weight": spectrum.as_ref().map(|s| s.sub_gap_weight(gap.nu)),
            "drift_window_us": window as f64 * dt,
            "drift_mean_D": drift(&walls),
            "drift_xi": drift(&xi),
            "spectrum": spectrum,
            "diagnostics": traj.diagnostics,
        }),
    )?;
    files.push(p);
    Ok(CommandReport { files, failures })
}

/// Result file of `mitigate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MitigationReport {
    pub meta: Meta,
    pub shots: PathBuf,
    pub n_shots: u64,
    pub n_sites: usize,
    pub boundary: Boundary,
    pub model: ReadoutModel,
    pub grid: ZneGrid,
    pub raw: MomentEstimate,
    pub wall_mean: ZneResult,
    pub wall_var: ZneResult,
    pub baseline_mean: Option<CorrectedMean>,
}

/// ZNE of wall mean and variance from a shot file.
pub fn cmd_mitigate(
    shots: &Path,
    calibration: Option<&Path>,
    cfg: Option<&CampaignConfig>,
    opts: &RunOptions,
    baseline: bool,
) -> Result<(MitigationReport, CommandReport)> {
    let cfg = cfg.map(|c| opts.apply(c));
    if let Some(c) = &cfg {
        c.validate()?;
    }
    let mcfg = cfg.as_ref().and_then(|c| c.mitigation.clone()).unwrap_or_default();
    let model = match calibration {
        Some(p) => load_calibration(p)?,
        None => mcfg.model()?,
    };
    let mut grid = mcfg.grid.clone();
    if let Some(seed) = opts.seed.or(cfg.as_ref().and_then(|c| c.seed)) {
        grid.seed = seed;
    }
    grid.validate()?;
    let (sample, sidecar) = read_shot_file(shots)?;
    let boundary = match (&sidecar, &cfg) {
        (Some(m), _) => m.boundary,
        (None, Some(c)) => c.system.boundary,
        (None, None) => {
            log::warn!("no side-car or config for {}; assuming a ring", shots.display());
            Boundary::Periodic
        }
    };
    let workers = resolve_workers(opts.workers, cfg.as_ref().and_then(|c| c.workers))?;
    let shot_hash = hex_sha256(&std::fs::read(shots)?);
    let hash = hex_sha256(
        serde_json::to_string(&serde_json::json!({
            "shots_sha256": shot_hash, "model": model, "grid": grid, "boundary": boundary,
            "mean_order": mcfg.mean_order, "var_order": mcfg.var_order, "variants": mcfg.variants,
        }))?
        .as_bytes(),
    );
    let meta = Meta::new(hash);
    let (raw, wall_mean, wall_var, base) = pool(workers)?.install(|| -> Result<_> {
        let raw = estimate_moments(&sample, boundary)?;
        let mean = zne_with_systematics(&sample, boundary, &model, &grid, WallObservable::WallMean, mcfg.mean_order, mcfg.variants)?;
        let var = zne_with_systematics(&sample, boundary, &model, &grid, WallObservable::WallVar, mcfg.var_order, mcfg.variants)?;
        let base = if baseline || mcfg.baseline { Some(confusion_inverse_mean(&sample, boundary, &model)?) } else { None };
        Ok((raw, mean, var, base))
    })?;
    let report = MitigationReport {
        meta,
        shots: shots.to_path_buf(),
        n_shots: sample.total_shots,
        n_sites: sample.n_sites,
        boundary,
        model,
        grid,
        raw,
        wall_mean,
        wall_var,
        baseline_mean: base,
    };
    let dir = match cfg {
        Some(c) => output_dir(&c)?,
        None => {
            let d = opts.out.clone().unwrap_or_else(|| PathBuf::from("kzchain-out"));
            std::fs::create_dir_all(&d)?;
            d
        }
    };
    let p = dir.join("zne.json");
    write_json(&p, &report)?;
    let failures = [&report.wall_mean, &report.wall_var]
        .iter()
        .filter(|r| r.clamped)
        .map(|r| format!("{:?}: amplification channel clamped", r.observable))
        .collect();
    Ok((report, CommandReport { files: vec![p], failures }))
}

/// Same sweep in the blockade subspace and the full space: `compare_space.csv`.
pub fn cmd_compare_space(cfg: &CampaignConfig, opts: &RunOptions) -> Result<CommandReport> {
    let cfg = opts.apply(cfg);
    cfg.validate()?;
    if cfg.system.L > MAX_FULL_SPACE_SITES {
        return Err(Error::Capacity(format!(
            "full-space comparison is limited to L <= {MAX_FULL_SPACE_SITES}, got {}",
            cfg.system.L
        )));
    }
    let t_deltas = cfg.t_deltas()?;
    let meta = Meta::new(cfg.hash());
    let constrained = SystemConfig { constrained: true, ..cfg.system.clone() };
    let full = SystemConfig { constrained: false, ..cfg.system.clone() };
    let a = run_ramps(&cfg, &constrained, &t_deltas)?;
    let b = run_ramps(&cfg, &full, &t_deltas)?;
    let dir = output_dir(&cfg)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (x, y) in a.iter().zip(&b) {
        match (&x.result, &y.result) {
            (Ok((c, _)), Ok((f, _))) => rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                x.gamma,
                x.t_delta,
                c.mean_d,
                c.var_d,
                anomaly_ratio(c.mean_d, c.var_d).unwrap_or(f64::NAN),
                f.mean_d,
                f.var_d,
                anomaly_ratio(f.mean_d, f.var_d).unwrap_or(f64::NAN)
            )),
            (rc, rf) => {
                for (space, r) in [("constrained", rc), ("full", rf)] {
                    if let Err(e) = r {
                        failures.push(format!("{space} t_delta = {} us: {e}", x.t_delta));
                    }
                }
            }
        }
    }
    let p = dir.join("compare_space.csv");
    write_csv(
        &p,
        &meta,
        "gamma_MHz_per_us,t_delta_us,mean_D_constrained,var_D_constrained,ratio_constrained,mean_D_full,var_D_full,ratio_full",
        &rows,
    )?;
    Ok(CommandReport { files: vec![p], failures })
}

/// Parsed CSV: header names and numeric rows, skipping `#` lines.
struct Table {
    meta_hash: Option<String>,
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
    path: String,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let reader = BufReader::new(File::open(path).map_err(|e| Error::Config(format!("{display}: {e}")))?);
        let mut meta_hash = None;
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(h) = comment.split_whitespace().find_map(|w| w.strip_prefix("config_sha256=")) {
                    meta_hash = Some(h.to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            match &columns {
                None => columns = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
                Some(cols) => {
                    let vals: Vec<f64> = line
                        .split(',')
                        .map(|f| f.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse { path: display.clone(), line: lineno, msg: e.to_string() })?;
                    if vals.len() != cols.len() {
                        return Err(Error::Parse {
                            path: display.clone(),
                            line: lineno,
                            msg: format!("expected {} fields, found {}", cols.len(), vals.len()),
                        });
                    }
                    rows.push((lineno, vals));
                }
            }
        }
        let columns = columns.ok_or_else(|| Error::Parse { path: display.clone(), line: 0, msg: "missing header".into() })?;
        Ok(Self { meta_hash, columns, rows, path: display })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Parse { path: self.path.clone(), line: 1, msg: format!("missing column {name}") })
    }
}

/// Re-runs the correlation-length and power-law fits on `correlators.csv`
/// in `input`, writing `fit.json` to the output directory.
pub fn cmd_fit(input: &Path, analysis: &AnalysisConfig, out: &Path) -> Result<(SweepFit, CommandReport)> {
    let table = Table::read(&input.join("correlators.csv"))?;
    let (ct, cg, cl, cd, cc) = (
        table.col("t_delta_us")?,
        table.col("gamma_MHz_per_us")?,
        table.col("l")?,
        table.col("density")?,
        table.col("defect")?,
    );
    let mut ramps: Vec<RampCorrelators> = Vec::new();
    for (lineno, row) in &table.rows {
        let l = row[cl] as usize;
        let fresh = ramps.last().map_or(true, |r| r.t_delta != row[ct]);
        if fresh {
            ramps.push(RampCorrelators { t_delta: row[ct], gamma: row[cg], density: Vec::new(), defect: Vec::new() });
        }
        let r = ramps.last_mut().expect("pushed above");
        if l != r.density.len() {
            return Err(Error::Parse { path: table.path.clone(), line: *lineno, msg: format!("expected l = {}, found {l}", r.density.len()) });
        }
        r.density.push(row[cd]);
        r.defect.push(row[cc]);
    }
    if ramps.is_empty() {
        return Err(Error::Config(format!("{} holds no correlator rows", table.path)));
    }
    let meta = Meta::new(table.meta_hash.clone().unwrap_or_default());
    let fit = fit_sweep(meta, &ramps, analysis);
    std::fs::create_dir_all(out)?;
    let p = out.join("fit.json");
    write_json(&p, &fit)?;
    let failures = fit.power_law_error.iter().map(|e| format!("power law: {e}")).collect();
    Ok((fit, CommandReport { files: vec![p], failures }))
}

/// Draws shots from a saved state, optionally through a readout channel.
pub fn cmd_sample(
    state: &Path,
    n_shots: u64,
    seed: u64,
    noise: Option<&ReadoutModel>,
    out: &Path,
) -> Result<CommandReport> {
    if n_shots == 0 {
        return Err(Error::Config("shot count must be positive".into()));
    }
    let psi = QuantumState::load(state)?;
    let mut sample = sample_bitstrings(&psi, n_shots, seed)?;
    if let Some(m) = noise {
        m.validate()?;
        sample = apply_readout_noise(&sample, m.eps01, m.eps10, seed.wrapping_add(1))?;
    }
    std::fs::create_dir_all(out)?;
    let p = out.join("shots.txt");
    let meta = ShotMetadata {
        n_sites: psi.basis().n_sites(),
        boundary: psi.basis().boundary(),
        provenance: serde_json::json!({
            "version": VERSION,
            "state": state,
            "state_sha256": hex_sha256(&std::fs::read(state)?),
            "shots": n_shots,
            "seed": seed,
            "readout": noise,
        }),
    };
    write_shot_file(&p, &sample, &meta)?;
    Ok(CommandReport { files: vec![p.clone(), crate::observables::sidecar_path(&p)], failures: Vec::new() })
}

/// Ramp time giving linear rate `gamma` for a system block.
pub fn t_delta_for(system: &SystemConfig, gamma: f64) -> Result<f64> {
    t_delta_for_gamma(gamma, &system.params()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(l: usize) -> CampaignConfig {
        let mut c = CampaignConfig::new(SystemConfig::with_sites(l));
        c.protocol.t_delta_us = Some(vec![2.0, 0.2]);
        c.workers = Some(1);
        c
    }

    #[test]
    fn parses_documented_keys() {
        let text = r#"{
            "system": {"L": 8, "a_um": 6.2, "boundary": "periodic", "constrained": true,
                       "C6_over_2pi_MHz_um6": 862690, "omega_max_over_2pi_MHz": 2.5,
                       "delta_min_over_2pi_MHz": -2.5, "delta_max_over_2pi_MHz": 4.0,
                       "t_delta_us": 1.0, "t_hold_us": 3.0, "t_edge_us": 0.5},
            "protocol": {"rate_grid": {"gamma_min_MHz_per_us": 0.2, "gamma_max_MHz_per_us": 100, "points": 4}},
            "seed": 7
        }"#;
        let c: CampaignConfig = serde_json::from_str(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.t_deltas().unwrap().len(), 4);
        assert_eq!(c.system.params().unwrap(), RydbergParams::default());
    }

    #[test]
    fn unknown_and_missing_keys_name_the_field() {
        let err = serde_json::from_str::<CampaignConfig>(r#"{"system": {"L": 8, "omega": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("omega"));
        let err = serde_json::from_str::<CampaignConfig>(r#"{"system": {"a_um": 6}}"#).unwrap_err();
        assert!(err.to_string().contains("`L`"));
    }

    #[test]
    fn empty_sweep_is_a_config_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(6);
        c.protocol.t_delta_us = Some(vec![]);
        let opts = RunOptions { out: Some(dir.path().join("out")), ..Default::default() };
        let err = cmd_sweep(&c, &opts).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn mitigation_requires_seed() {
        let mut c = small(6);
        c.mitigation = Some(MitigationConfig::default());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.seed = Some(1);
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = small(6);
        let mut b = a.clone();
        b.workers = Some(8);
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(3);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn worker_resolution_order() {
        assert_eq!(resolve_workers(Some(3), Some(5)).unwrap(), 3);
        assert!(resolve_workers(Some(0), None).is_err());
    }

    #[test]
    fn hold_interval_longer_than_window_rejected() {
        let mut c = small(6);
        c.protocol.hold = Some(HoldConfig { t_delta_us: Some(1.0), t_hold_us: Some(0.5), sample_interval_us: 1.0, readout: HoldReadout::AfterRampDown });
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_hold(&c, &RunOptions { out: Some(dir.path().into()), ..Default::default() }).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn compare_space_capacity() {
        let c = small(18);
        let err = cmd_compare_space(&c, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn calibration_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.json");
        std::fs::write(&p, r#"{"eps10": 0.061, "d_eps10": 0.004, "eps01": 0.009}"#).unwrap();
        let err = load_calibration(&p).unwrap_err();
        assert!(err.to_string().contains("d_eps01"), "{err}");
        std::fs::write(&p, r#"{"eps10": 0.061, "d_eps10": 0.004, "eps01": 0.009, "d_eps01": 0.002}"#).unwrap();
        assert_eq!(load_calibration(&p).unwrap(), ReadoutModel::default());
    }
}
