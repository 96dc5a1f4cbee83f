//! Certified continuous upper bounds and sweeps over the number of
//! causality constraints `h`.
//!
//! Any `λ ≥ 0` and `η` give a valid upper bound through the continuous dual
//! `g`, so the discretized optimum is re-evaluated by quadrature and the
//! quadrature error is added on top.

use std::f64::consts::{LN_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualopt::{nu_closed_form, solve_dual, DualSolution, SolverSettings};
use crate::error::{Error, Result};
use crate::freqgrid::{trig_basis, DualVars, FrequencyGrid};
use crate::quadrature::adaptive_simpson;
use crate::spectra::NoiseModel;
use crate::synthesis::{synthesize, Synthesis};

pub const DEFAULT_QUAD_TOL: f64 = 1e-10;

/// One row of the convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub h: usize,
    pub m: usize,
    /// Certified continuous bound, quadrature error included.
    pub upper_bits: f64,
    /// `-max g_m` on the solve grid.
    pub dual_value_bits: f64,
    pub lower_bits: Option<f64>,
    pub gap_bits: Option<f64>,
    pub quad_error_estimate: f64,
    /// The `h` whose dual point certifies `upper_bits`. A point for `h` padded
    /// with `η_{h+1} = 0` is dual feasible for `h + 1`, so a sweep reports the
    /// smallest bound found at or below each `h`.
    pub upper_from_h: usize,
    /// Set when the solver or the synthesis failed for this `h`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl BoundsReport {
    /// Records an achievable rate and the resulting gap.
    pub fn with_lower(mut self, lower_bits: f64) -> Self {
        self.lower_bits = Some(lower_bits);
        self.gap_bits = Some(self.upper_bits - lower_bits);
        self
    }
}

/// Integrand of the continuous dual at one frequency, without the constant `½`.
fn dual_integrand(vars: &DualVars, sw: f64, theta: f64) -> f64 {
    let (cos, sin) = trig_basis(vars.h(), theta);
    let (re, im) = vars.re_im(sw, &cos, &sin);
    let r2 = re * re + im * im;
    let ls = vars.lambda * sw;
    let nu = nu_closed_form(r2, vars.lambda, sw);
    if nu > 0.0 {
        0.5 * (2.0 * ls - nu).ln() - r2 / (2.0 * nu) + ls
    } else {
        // limit on r² = 0
        0.5 * (2.0 * ls).ln() + ls
    }
}

/// Continuous dual `g(λ, η, η₀)` in nats, with `ν(θ)` at its closed form,
/// together with the absolute quadrature error estimate.
pub fn eval_g_continuous(vars: &DualVars, model: &NoiseModel, power: f64, quad_tol: f64) -> Result<(f64, f64)> {
    if !(vars.lambda > 0.0) {
        return Err(Error::InfeasibleDual(format!("lambda = {} must be positive", vars.lambda)));
    }
    if !(quad_tol > 0.0) {
        return Err(Error::InvalidArgument("quad_tol must be positive".into()));
    }
    let panels = 16 * (vars.h() + 1);
    // g = (1/π)∫_0^π (...) dθ, so the integral needs tolerance π·quad_tol
    let q = adaptive_simpson(|t| dual_integrand(vars, model.psd(t), t), 0.0, PI, PI * quad_tol, panels)
        .map_err(|e| match e {
            Error::Quadrature { estimate, error_bound } => Error::Quadrature {
                estimate: estimate / PI - vars.lambda * power + vars.eta0 + 0.5,
                error_bound: error_bound / PI,
            },
            other => other,
        })?;
    Ok((q.value / PI - vars.lambda * power + vars.eta0 + 0.5, q.error_estimate / PI))
}

/// `-g/ln 2` at the solution's `(λ, η, η₀)`, plus the quadrature error.
/// Returns `(upper_bits, error_bits)`.
pub fn certified_upper_bound(sol: &DualSolution, model: &NoiseModel, power: f64, quad_tol: f64) -> Result<(f64, f64)> {
    let (g, err) = eval_g_continuous(&sol.point.vars, model, power, quad_tol)?;
    Ok((-g / LN_2 + err / LN_2, err / LN_2))
}

/// Report row plus the artifacts it was built from.
#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub report: BoundsReport,
    pub solution: Option<DualSolution>,
    pub synthesis: Option<Synthesis>,
}

/// Solves, bounds and synthesizes for one `h`.
pub fn bound_for(model: &NoiseModel, power: f64, m: usize, h: usize, settings: &SolverSettings, quad_tol: f64) -> SweepEntry {
    let failed = |msg: String| SweepEntry {
        report: BoundsReport {
            h,
            m,
            upper_bits: f64::NAN,
            dual_value_bits: f64::NAN,
            lower_bits: None,
            gap_bits: None,
            quad_error_estimate: f64::NAN,
            upper_from_h: h,
            error: Some(msg),
        },
        solution: None,
        synthesis: None,
    };
    let grid = match FrequencyGrid::new(m, h, model) {
        Ok(g) => g,
        Err(e) => return failed(e.to_string()),
    };
    let (sol, mut error) = match solve_dual(&grid, power, settings) {
        Ok(sol) => (sol, None),
        // the best iterate still yields a valid, if looser, upper bound
        Err(Error::NotConverged { best, iterations, certificate }) => {
            let msg = format!("dual solver did not converge after {iterations} iterations (certificate {certificate:e})");
            (*best, Some(msg))
        }
        Err(e) => return failed(e.to_string()),
    };
    let (upper_bits, quad_err) = match certified_upper_bound(&sol, model, power, quad_tol) {
        Ok(v) => v,
        Err(e) => return failed(e.to_string()),
    };
    let mut report = BoundsReport {
        h,
        m,
        upper_bits,
        dual_value_bits: sol.bound_bits(),
        lower_bits: None,
        gap_bits: None,
        quad_error_estimate: quad_err,
        upper_from_h: h,
        error: None,
    };
    let synthesis = match synthesize(&sol, &grid, model, power) {
        Ok(s) => {
            report = report.with_lower(s.rate.bits);
            Some(s)
        }
        Err(e) => {
            error.get_or_insert_with(|| e.to_string());
            None
        }
    };
    report.error = error;
    SweepEntry { report, solution: Some(sol), synthesis }
}

/// One entry per `h = 1..=h_max`, ordered by `h`. Failures are recorded in
/// the entry and do not stop the sweep.
///
/// `upper_bits` is the running minimum over `h' ≤ h` of the certified bounds
/// (see [`BoundsReport::upper_from_h`]), which makes the column
/// non-increasing; the continuous re-evaluation of each grid optimum alone
/// need not be.
pub fn h_sweep(
    model: &NoiseModel,
    power: f64,
    m: usize,
    h_max: usize,
    settings: &SolverSettings,
    quad_tol: f64,
) -> Result<Vec<SweepEntry>> {
    if h_max < 1 {
        return Err(Error::InvalidArgument("h_max must be at least 1".into()));
    }
    let mut entries: Vec<SweepEntry> =
        (1..=h_max).into_par_iter().map(|h| bound_for(model, power, m, h, settings, quad_tol)).collect();
    for k in 1..entries.len() {
        let prev = entries[k - 1].report.clone();
        let report = &mut entries[k].report;
        if prev.upper_bits < report.upper_bits || (report.upper_bits.is_nan() && !prev.upper_bits.is_nan()) {
            report.upper_bits = prev.upper_bits;
            report.quad_error_estimate = prev.quad_error_estimate;
            report.upper_from_h = prev.upper_from_h;
            if let Some(lower) = report.lower_bits {
                report.gap_bits = Some(report.upper_bits - lower);
            }
        }
    }
    Ok(entries)
}
