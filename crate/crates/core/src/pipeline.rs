//! End-to-end run: bounds sweep, filter synthesis, controller, coding
//! scheme and an optional transmission simulation, with JSON configuration
//! and report files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{h_sweep, BoundsReport, DEFAULT_QUAD_TOL};
use crate::control::{controller_from_parameter, simulate_transmission, stable_unstable_split, youla_controller, CodingScheme, TransmissionStats};
use crate::dualopt::SolverSettings;
use crate::error::{Error, Result};
use crate::reduction::{hankel_singular_values, kung_reduce};
use crate::spectra::NoiseModel;
use crate::synthesis::{FirFilter, Rate};

pub const DEFAULT_M: usize = 40;
pub const DEFAULT_H_MAX: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub trials: usize,
    /// Defaults to three quarters of `horizon × rate`, rounded down.
    pub message_bits: Option<u32>,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { horizon: 40, trials: 1000, message_bits: None, seed: 0 }
    }
}

/// Validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub channel: NoiseModel,
    pub power: f64,
    pub m: usize,
    pub h_max: usize,
    pub solver: SolverSettings,
    pub quad_tol: f64,
    /// Order of the reduced controller; `None` picks it from the Hankel
    /// singular values.
    pub controller_order: Option<usize>,
    pub simulation: Option<SimulationConfig>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    num: Vec<f64>,
    #[serde(default)]
    den: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    horizon: Option<usize>,
    trials: Option<usize>,
    message_bits: Option<u32>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    channel: RawChannel,
    power: f64,
    m: Option<usize>,
    h_max: Option<usize>,
    solver: Option<SolverSettings>,
    quad_tol: Option<f64>,
    controller_order: Option<usize>,
    simulation: Option<RawSimulation>,
    out_dir: Option<PathBuf>,
}

/// A configuration and the warnings raised while checking it.
#[derive(Clone, Debug)]
pub struct Validated {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

/// Parses and checks a JSON configuration, reporting every violated
/// constraint at once.
pub fn validate_config(raw: &str) -> Result<Validated> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| Error::Config(vec![format!("malformed document: {e}")]))?;
    validate_value(value)
}

/// Same as [`validate_config`] on an already parsed document.
pub fn validate_value(value: serde_json::Value) -> Result<Validated> {
    let raw: RawConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("malformed document: {e}")]))?;
    let mut problems = Vec::new();
    let mut warnings = Vec::new();

    let channel = match NoiseModel::new(raw.channel.num, raw.channel.den.unwrap_or_else(|| vec![1.0])) {
        Ok(model) => Some(model),
        Err(e) => {
            problems.push(format!("channel: {e}"));
            None
        }
    };
    if let Some(model) = &channel {
        if model.is_flat() {
            warnings.push("flat channel spectrum: the strong-duality guarantee assumes a non-flat spectrum".to_string());
        }
    }
    if !(raw.power > 0.0 && raw.power.is_finite()) {
        problems.push(format!("power must be positive and finite, got {}", raw.power));
    }
    let m = raw.m.unwrap_or(DEFAULT_M);
    let h_max = raw.h_max.unwrap_or(DEFAULT_H_MAX);
    if h_max == 0 {
        problems.push("h_max must be at least 1".into());
    }
    if m <= h_max {
        problems.push(format!("m must exceed h_max (m = {m}, h_max = {h_max})"));
    }
    let solver = raw.solver.unwrap_or_default();
    if let Err(e) = solver.validate() {
        problems.push(format!("solver: {e}"));
    }
    let quad_tol = raw.quad_tol.unwrap_or(DEFAULT_QUAD_TOL);
    if !(quad_tol > 0.0 && quad_tol.is_finite()) {
        problems.push(format!("quad_tol must be positive, got {quad_tol}"));
    }
    if raw.controller_order == Some(0) {
        problems.push("controller_order must be at least 1".into());
    }
    let simulation = raw.simulation.map(|s| {
        let d = SimulationConfig::default();
        SimulationConfig {
            horizon: s.horizon.unwrap_or(d.horizon),
            trials: s.trials.unwrap_or(d.trials),
            message_bits: s.message_bits,
            seed: s.seed.unwrap_or(d.seed),
        }
    });
    if let Some(s) = &simulation {
        if s.horizon == 0 {
            problems.push("simulation.horizon must be at least 1".into());
        }
        if s.trials == 0 {
            problems.push("simulation.trials must be at least 1".into());
        }
        if s.message_bits == Some(0) {
            problems.push("simulation.message_bits must be at least 1".into());
        }
    }
    match channel {
        Some(channel) if problems.is_empty() => Ok(Validated {
            config: RunConfig {
                channel,
                power: raw.power,
                m,
                h_max,
                solver,
                quad_tol,
                controller_order: raw.controller_order,
                simulation,
                out_dir: raw.out_dir,
            },
            warnings,
        }),
        _ => Err(Error::Config(problems)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedController {
    pub order: usize,
    /// `[re, im]`
    pub poles: Vec<[f64; 2]>,
    /// `Σ log₂|p|` over poles outside the unit circle.
    pub rate_bits: f64,
    pub truncation_error_bound: f64,
    pub hankel_singular_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
    /// Certified upper bound at `h_max`, bits per channel use.
    pub capacity_bits: Option<f64>,
    /// Rate of the synthesized scheme at `h_max`.
    pub achievable_bits: Option<f64>,
    pub convergence: Vec<BoundsReport>,
    pub filter: Option<FirFilter>,
    pub rate: Option<Rate>,
    pub scheme: Option<CodingScheme>,
    pub reduced_controller: Option<ReducedController>,
    pub transmission: Option<TransmissionStats>,
}

impl RunReport {
    fn fail(mut self, e: Error) -> Self {
        self.status = RunStatus::Incomplete;
        self.error = Some(e.to_string());
        self
    }

    /// Convergence table as CSV: `h,upper_bits,lower_bits,gap_bits`.
    pub fn convergence_csv(&self) -> String {
        let mut out = String::from("h,upper_bits,lower_bits,gap_bits\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.convergence {
            let _ = writeln!(out, "{},{},{},{}", row.h, row.upper_bits, opt(row.lower_bits), opt(row.gap_bits));
        }
        out
    }
}

/// Reduces `filter` to `order` states (or the Hankel default) and forms the
/// matching controller.
pub fn reduced_controller(filter: &FirFilter, order: Option<usize>) -> Result<ReducedController> {
    let spectrum = hankel_singular_values(&filter.coeffs)?;
    let order = order.unwrap_or(spectrum.chosen_order).max(1);
    let q = kung_reduce(&filter.coeffs, order)?;
    let k = controller_from_parameter(&q)?;
    let poles = k.poles()?;
    let unstable: Vec<f64> = poles.iter().filter(|z| z.norm() > 1.0).map(|z| z.norm().log2()).collect();
    Ok(ReducedController {
        order,
        poles: poles.iter().map(|z| [z.re, z.im]).collect(),
        rate_bits: unstable.iter().sum(),
        truncation_error_bound: spectrum.with_order(order).truncation_error_bound,
        hankel_singular_values: spectrum.singular_values,
    })
}

/// Runs every stage. Failures are recorded in the report, which then has
/// status [`RunStatus::Incomplete`] and keeps whatever was computed before.
pub fn compute_report(validated: &Validated) -> RunReport {
    let config = &validated.config;
    let mut report = RunReport {
        status: RunStatus::Complete,
        error: None,
        warnings: validated.warnings.clone(),
        config: config.clone(),
        capacity_bits: None,
        achievable_bits: None,
        convergence: Vec::new(),
        filter: None,
        rate: None,
        scheme: None,
        reduced_controller: None,
        transmission: None,
    };
    let entries = match h_sweep(&config.channel, config.power, config.m, config.h_max, &config.solver, config.quad_tol) {
        Ok(entries) => entries,
        Err(e) => return report.fail(e),
    };
    report.convergence = entries.iter().map(|e| e.report.clone()).collect();
    for row in &report.convergence {
        if let Some(msg) = &row.error {
            report.warnings.push(format!("h = {}: {msg}", row.h));
        }
    }
    let last = entries.last().expect("h_max >= 1");
    if last.report.upper_bits.is_finite() {
        report.capacity_bits = Some(last.report.upper_bits);
    }
    let Some(synthesis) = last.synthesis.clone() else {
        let msg = last.report.error.clone().unwrap_or_else(|| "no filter synthesized".into());
        return report.fail(Error::Numerical(format!("h = {}: {msg}", config.h_max)));
    };
    report.achievable_bits = Some(synthesis.rate.bits);
    report.filter = Some(synthesis.filter.clone());
    report.rate = Some(synthesis.rate);

    let scheme = match stable_unstable_split(&youla_controller(&synthesis.filter)) {
        Ok(s) => s,
        Err(e) => return report.fail(e),
    };
    report.scheme = Some(scheme.clone());
    match reduced_controller(&synthesis.filter, config.controller_order) {
        Ok(r) => report.reduced_controller = Some(r),
        Err(e) => return report.fail(e),
    }

    if let Some(sim) = &config.simulation {
        let n_bits = sim.message_bits.unwrap_or_else(|| (0.75 * sim.horizon as f64 * scheme.rate_bits).floor().max(1.0) as u32);
        match simulate_transmission(&scheme, Some(&config.channel), sim.horizon, n_bits, sim.trials, sim.seed) {
            Ok(stats) => report.transmission = Some(stats),
            Err(e) => return report.fail(e),
        }
    }
    report
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Persists `report.json`, `convergence.csv`, and, when available,
/// `impulse.csv` and `scheme.json` under `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("convergence.csv"), report.convergence_csv().as_bytes())?;
    if let Some(filter) = &report.filter {
        write_atomic(&dir.join("impulse.csv"), filter.impulse_csv().as_bytes())?;
    }
    if let Some(scheme) = &report.scheme {
        write_atomic(&dir.join("scheme.json"), serde_json::to_string_pretty(scheme)?.as_bytes())?;
    }
    // last, so that a complete report implies the other files are in place
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

/// Computes and persists a run. The returned report says whether the run
/// completed; only I/O problems are returned as errors.
pub fn run_pipeline(validated: &Validated, dir: &Path) -> Result<RunReport> {
    let report = compute_report(validated);
    write_outputs(&report, dir)?;
    Ok(report)
}
