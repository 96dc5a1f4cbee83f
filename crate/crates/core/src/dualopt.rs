//! The discretized concave dual `g_m` and its maximization.
//!
//! For a grid of `2m` frequencies the dual objective is
//!
//! ```text
//! g_m = (1/2m) Σ_i [ ½ log(2λS_i − ν_i) + ½ − r_i²/(2ν_i) + λS_i ] − λP + η₀
//! ```
//!
//! with `r_i² = (2λS_i + η'A_i + η₀)² + (η'B_i)²`. The maximum is found by
//! damped Newton iterations. By default `ν` is eliminated through its
//! stationarity condition ([`nu_closed_form`]), which leaves only `h + 2`
//! unknowns; the joint parameterization over `(λ, η₀, η, ν)` is kept as an
//! independent route to the same optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqgrid::{DualPoint, DualVars, FrequencyGrid};
use crate::linalg::pairwise_sum;

/// Lower clamp on `λ` inside the iterations.
pub const LAMBDA_FLOOR: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Newton on `(λ, η₀, η)` with `ν` at its closed form.
    #[default]
    Eliminated,
    /// Newton on `(λ, η₀, η, ν_1..ν_2m)`.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub tol_grad: f64,
    pub max_iter: usize,
    pub barrier_init: f64,
    pub barrier_shrink: f64,
    /// Barrier weight of the last stage.
    pub barrier_final: f64,
    pub parameterization: Parameterization,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_grad: 1e-9,
            max_iter: 500,
            barrier_init: 1e-2,
            barrier_shrink: 0.1,
            barrier_final: 1e-13,
            parameterization: Parameterization::Eliminated,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_grad > 0.0) {
            return Err(Error::InvalidArgument("tol_grad must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.barrier_final >= 0.0)
            || !(self.barrier_init >= self.barrier_final)
            || !(self.barrier_shrink > 0.0 && self.barrier_shrink < 1.0)
        {
            return Err(Error::InvalidArgument(
                "barrier schedule must satisfy init >= final >= 0, 0 < shrink < 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub point: DualPoint,
    /// Optimal `g_m` in nats; the discretized bound is `-value_nats`.
    pub value_nats: f64,
    pub iterations: usize,
    /// KKT residual at exit, see [`kkt_residual`].
    pub certificate: f64,
    /// The spectrum is flat, which the strong duality result excludes.
    pub flat_spectrum: bool,
    /// Samples where the maximizer sits on `r_i² = 0`, so that `ν_i` is only
    /// a smoothing residue and `(a_i, b_i)` are not determined pointwise.
    #[serde(default)]
    pub ridge: Vec<usize>,
}

impl DualSolution {
    /// `C_fb(m, h) = -max g_m`, in bits.
    pub fn bound_bits(&self) -> f64 {
        -self.value_nats / std::f64::consts::LN_2
    }
}

/// `ν = (−r² + √(r⁴ + 8λS r²)) / 2`, evaluated as
/// `4λS r² / (r² + √(r⁴ + 8λS r²))` to avoid cancellation.
pub fn nu_closed_form(r2: f64, lambda: f64, sw: f64) -> f64 {
    if r2 <= 0.0 {
        return 0.0;
    }
    let ls = lambda * sw;
    4.0 * ls * r2 / (r2 + (r2 * r2 + 8.0 * ls * r2).sqrt())
}

/// Maximizer over `ν` of one summand plus `μ log ν`: the positive root of
/// `(1 + 2μ)ν² − (4μλS − r²)ν − 2λS r² = 0`. Equals [`nu_closed_form`] at
/// `μ = 0` and stays positive on `r² = 0` for `μ > 0`.
pub fn nu_smoothed(r2: f64, lambda: f64, sw: f64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return nu_closed_form(r2, lambda, sw);
    }
    let ls = lambda * sw;
    let a = 1.0 + 2.0 * mu;
    let b = 4.0 * mu * ls - r2;
    let c = 2.0 * ls * r2;
    let disc = (b * b + 4.0 * a * c).sqrt();
    if b >= 0.0 {
        (b + disc) / (2.0 * a)
    } else {
        2.0 * c / (disc - b)
    }
}

fn point_term(lambda: f64, sw: f64, r2: f64, nu: f64) -> f64 {
    0.5 * (2.0 * lambda * sw - nu).ln() + 0.5 - r2 / (2.0 * nu) + lambda * sw
}

/// `g_m(λ, η, η₀, ν)` in nats.
pub fn eval_gm(dp: &DualPoint, grid: &FrequencyGrid, power: f64) -> Result<f64> {
    dp.check_domain(grid)?;
    let v = &dp.vars;
    let terms: Vec<f64> = (0..grid.len())
        .map(|i| {
            let (a, b) = grid.basis(i);
            let (re, im) = v.re_im(grid.sw()[i], a, b);
            point_term(v.lambda, grid.sw()[i], re * re + im * im, dp.nu[i])
        })
        .collect();
    Ok(pairwise_sum(&terms) / grid.len() as f64 - v.lambda * power + v.eta0)
}

/// Gradient of `g_m` with respect to every coordinate of a [`DualPoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct DualGradient {
    pub lambda: f64,
    pub eta0: f64,
    pub eta: Vec<f64>,
    pub nu: Vec<f64>,
}

impl DualGradient {
    pub fn sup_norm(&self) -> f64 {
        std::iter::once(self.lambda)
            .chain(std::iter::once(self.eta0))
            .chain(self.eta.iter().copied())
            .chain(self.nu.iter().copied())
            .fold(0.0, |acc, g| acc.max(g.abs()))
    }
}

/// Per-sample derivatives of one summand of `g_m`, with `x = (λ, η₀, η)`.
struct PointDerivs {
    value: f64,
    gx: Vec<f64>,
    gnu: f64,
    hxx: Vec<f64>,
    hxnu: Vec<f64>,
    hnunu: f64,
}

fn point_derivs(vars: &DualVars, sw: f64, cos: &[f64], sin: &[f64], nu: f64, second: bool) -> PointDerivs {
    let dim = vars.h() + 2;
    let lambda = vars.lambda;
    let (re, im) = vars.re_im(sw, cos, sin);
    let r2 = re * re + im * im;
    let q = 2.0 * lambda * sw - nu;
    let value = point_term(lambda, sw, r2, nu);

    // ∂re/∂x = (2S, 1, A), ∂im/∂x = (0, 0, B)
    let mut dre = Vec::with_capacity(dim);
    dre.push(2.0 * sw);
    dre.push(1.0);
    dre.extend_from_slice(cos);
    let mut dim_ = vec![0.0, 0.0];
    dim_.extend_from_slice(sin);

    let mut gx: Vec<f64> = (0..dim).map(|k| -(re * dre[k] + im * dim_[k]) / nu).collect();
    gx[0] += sw / q + sw;
    let gnu = -0.5 / q + r2 / (2.0 * nu * nu);

    let (mut hxx, mut hxnu, mut hnunu) = (Vec::new(), Vec::new(), 0.0);
    if second {
        hxx = vec![0.0; dim * dim];
        for a in 0..dim {
            for b in 0..dim {
                hxx[a * dim + b] = -(dre[a] * dre[b] + dim_[a] * dim_[b]) / nu;
            }
        }
        hxx[0] -= 2.0 * sw * sw / (q * q);
        hxnu = (0..dim).map(|k| (re * dre[k] + im * dim_[k]) / (nu * nu)).collect();
        hxnu[0] += sw / (q * q);
        hnunu = -0.5 / (q * q) - r2 / (nu * nu * nu);
    }
    PointDerivs { value, gx, gnu, hxx, hxnu, hnunu }
}

/// Exact gradient of `g_m`.
pub fn grad_gm(dp: &DualPoint, grid: &FrequencyGrid, power: f64) -> Result<DualGradient> {
    dp.check_domain(grid)?;
    let n = grid.len();
    let dim = grid.h() + 2;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim];
    let mut nu = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = grid.basis(i);
        let d = point_derivs(&dp.vars, grid.sw()[i], a, b, dp.nu[i], false);
        for k in 0..dim {
            cols[k].push(d.gx[k]);
        }
        nu.push(d.gnu / n as f64);
    }
    let mean: Vec<f64> = cols.iter().map(|c| pairwise_sum(c) / n as f64).collect();
    Ok(DualGradient {
        lambda: mean[0] - power,
        eta0: mean[1] + 1.0,
        eta: mean[2..].to_vec(),
        nu,
    })
}

/// Point with `ν_i` set by [`nu_closed_form`] at every grid sample.
pub fn eliminate_nu(vars: &DualVars, grid: &FrequencyGrid) -> DualPoint {
    let nu = (0..grid.len())
        .map(|i| {
            let (a, b) = grid.basis(i);
            let (re, im) = vars.re_im(grid.sw()[i], a, b);
            nu_closed_form(re * re + im * im, vars.lambda, grid.sw()[i])
        })
        .collect();
    DualPoint { vars: vars.clone(), nu }
}

fn pack(v: &DualVars) -> Vec<f64> {
    let mut x = Vec::with_capacity(v.h() + 2);
    x.push(v.lambda);
    x.push(v.eta0);
    x.extend_from_slice(&v.eta);
    x
}

fn unpack(x: &[f64]) -> DualVars {
    DualVars { lambda: x[0], eta0: x[1], eta: x[2..].to_vec() }
}

/// Local model of the barrier objective at an iterate.
struct Local {
    value: f64,
    grad: Vec<f64>,
    /// Newton ascent direction.
    step: Vec<f64>,
}

/// Solves `(-H) d = g` for symmetric negative definite `H`, regularizing
/// when the factorization fails.
fn newton_solve(neg_hess: DMatrix<f64>, grad: &[f64]) -> Result<Vec<f64>> {
    let g = DVector::from_column_slice(grad);
    let scale = neg_hess.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut shift = 0.0;
    for _ in 0..40 {
        let mut m = neg_hess.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += shift;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d.iter().copied().collect());
            }
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
    }
    Err(Error::Numerical("Newton system could not be factorized".into()))
}

fn eliminated_local(x: &[f64], grid: &FrequencyGrid, power: f64, mu: f64) -> Result<Local> {
    let vars = unpack(x);
    let dim = x.len();
    let n = grid.len();
    let mut values = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    let mut gcols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim];
    let mut hcols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim * dim];
    for i in 0..n {
        let (a, b) = grid.basis(i);
        let sw = grid.sw()[i];
        let (re, im) = vars.re_im(sw, a, b);
        let nu = nu_smoothed(re * re + im * im, vars.lambda, sw, mu);
        if !(nu > 0.0) {
            return Err(Error::InfeasibleDual(format!("r² vanishes at grid point {i}")));
        }
        let d = point_derivs(&vars, sw, a, b, nu, true);
        values.push(d.value);
        logs.push(nu.ln());
        for k in 0..dim {
            gcols[k].push(d.gx[k]);
        }
        // Schur complement of the ν block (envelope of the ν-maximization)
        let hnunu = d.hnunu - mu / (nu * nu);
        for r in 0..dim {
            for c in 0..dim {
                hcols[r * dim + c].push(d.hxx[r * dim + c] - d.hxnu[r] * d.hxnu[c] / hnunu);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut value = pairwise_sum(&values) * inv_n - vars.lambda * power + vars.eta0;
    let mut grad: Vec<f64> = gcols.iter().map(|c| pairwise_sum(c) * inv_n).collect();
    grad[0] -= power;
    grad[1] += 1.0;
    let mut neg_hess = DMatrix::from_fn(dim, dim, |r, c| -pairwise_sum(&hcols[r * dim + c]) * inv_n);
    if mu > 0.0 {
        value += mu * (vars.lambda.ln() + pairwise_sum(&logs) * inv_n);
        grad[0] += mu / vars.lambda;
        neg_hess[(0, 0)] += mu / (vars.lambda * vars.lambda);
    }
    let neg_hess = (&neg_hess + neg_hess.transpose()) * 0.5;
    let step = newton_solve(neg_hess, &grad)?;
    Ok(Local { value, grad, step })
}

fn joint_local(x: &[f64], grid: &FrequencyGrid, power: f64, mu: f64) -> Result<Local> {
    let n = grid.len();
    let dim = x.len() - n;
    let vars = unpack(&x[..dim]);
    let nus = &x[dim..];
    let inv_n = 1.0 / n as f64;
    let mut values = Vec::with_capacity(n);
    let mut gcols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim];
    let mut hcols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim * dim];
    let mut gnu = Vec::with_capacity(n);
    let mut hxnu = Vec::with_capacity(n);
    let mut hnunu = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = grid.basis(i);
        let d = point_derivs(&vars, grid.sw()[i], a, b, nus[i], true);
        values.push(d.value);
        for k in 0..dim {
            gcols[k].push(d.gx[k]);
        }
        for k in 0..dim * dim {
            hcols[k].push(d.hxx[k]);
        }
        gnu.push(d.gnu * inv_n);
        hxnu.push(d.hxnu.iter().map(|v| v * inv_n).collect::<Vec<_>>());
        hnunu.push(d.hnunu * inv_n);
    }
    let mut value = pairwise_sum(&values) * inv_n - vars.lambda * power + vars.eta0;
    let mut gx: Vec<f64> = gcols.iter().map(|c| pairwise_sum(c) * inv_n).collect();
    gx[0] -= power;
    gx[1] += 1.0;
    let mut hxx = DMatrix::from_fn(dim, dim, |r, c| pairwise_sum(&hcols[r * dim + c]) * inv_n);
    if mu > 0.0 {
        value += mu * vars.lambda.ln();
        gx[0] += mu / vars.lambda;
        hxx[(0, 0)] -= mu / (vars.lambda * vars.lambda);
        // the ν ≥ 0 constraints get the same barrier weight
        let logs: Vec<f64> = nus.iter().map(|v| v.ln()).collect();
        value += mu * pairwise_sum(&logs) * inv_n;
        for i in 0..n {
            gnu[i] += mu * inv_n / nus[i];
            hnunu[i] -= mu * inv_n / (nus[i] * nus[i]);
        }
    }
    // Block elimination of the diagonal ν block:
    // (Hxx − Hxν D⁻¹ Hνx) dx = −gx + Hxν D⁻¹ gν,  dν = D⁻¹(−gν − Hνx dx)
    let mut schur = hxx.clone();
    let mut rhs = gx.iter().map(|g| -g).collect::<Vec<_>>();
    for i in 0..n {
        for r in 0..dim {
            rhs[r] += hxnu[i][r] * gnu[i] / hnunu[i];
            for c in 0..dim {
                schur[(r, c)] -= hxnu[i][r] * hxnu[i][c] / hnunu[i];
            }
        }
    }
    // Newton: H d = −g  ⇔  (−H) d = g
    let neg_schur = (&schur + schur.transpose()) * -0.5;
    let neg_rhs: Vec<f64> = rhs.iter().map(|v| -v).collect();
    let dx = newton_solve(neg_schur, &neg_rhs)?;
    let mut step = dx.clone();
    for i in 0..n {
        let coupling: f64 = hxnu[i].iter().zip(&dx).map(|(h, d)| h * d).sum();
        step.push((-gnu[i] - coupling) / hnunu[i]);
    }
    let mut grad = gx;
    grad.extend_from_slice(&gnu);
    Ok(Local { value, grad, step })
}

/// Largest step fraction keeping `λ ≥ LAMBDA_FLOOR` and, in the joint form,
/// `0 < ν_i < 2λS_i`, backed off from the boundary.
fn max_feasible_step(x: &[f64], step: &[f64], grid: &FrequencyGrid, joint: bool) -> f64 {
    let mut t: f64 = 1.0;
    if step[0] < 0.0 {
        t = t.min(0.99 * (x[0] - LAMBDA_FLOOR) / -step[0]);
    }
    if joint {
        let dim = x.len() - grid.len();
        for (i, &s) in grid.sw().iter().enumerate() {
            let nu = x[dim + i];
            let dnu = step[dim + i];
            if dnu < 0.0 {
                t = t.min(0.99 * nu / -dnu);
            }
            // slack = 2λS − ν
            let slack = 2.0 * x[0] * s - nu;
            let dslack = 2.0 * step[0] * s - dnu;
            if dslack < 0.0 {
                t = t.min(0.99 * slack / -dslack);
            }
        }
    }
    t.max(0.0)
}

/// Samples with `ν_i ≤ RIDGE_NU · 2λS_i` are treated as lying on the ridge
/// `r_i² = 0`, where `g_m` with `ν` maximized out is not differentiable.
pub const RIDGE_NU: f64 = 1e-8;

/// Indices `i` with `ν_i ≤ RIDGE_NU · 2λS_i`.
pub fn ridge_samples(dp: &DualPoint, grid: &FrequencyGrid) -> Vec<usize> {
    (0..grid.len()).filter(|&i| dp.nu[i] <= RIDGE_NU * 2.0 * dp.vars.lambda * grid.sw()[i]).collect()
}

/// KKT residual of a dual point.
///
/// Off the ridge this is the gradient sup-norm, with `λ ≥ 0` counted as
/// active when the iterate sits on the bound and the gradient points
/// outward. On the ridge `ν_i` is maximized out and the sample contributes a
/// subgradient `w·(∂re, ∂im)` with `|w| ≤ 1/√(2λS_i)` instead of a gradient;
/// the residual uses the minimum-norm choice of those `w` inside the disks.
pub fn kkt_residual(dp: &DualPoint, grid: &FrequencyGrid, power: f64) -> Result<f64> {
    dp.check_domain(grid)?;
    let vars = &dp.vars;
    let n = grid.len();
    let dim = grid.h() + 2;
    let inv_n = 1.0 / n as f64;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim];
    let mut residual: f64 = 0.0;
    // (sample, current w, disk radius)
    let mut ridge: Vec<(usize, [f64; 2], f64)> = Vec::new();
    for i in 0..n {
        let (a, b) = grid.basis(i);
        let sw = grid.sw()[i];
        let nu = dp.nu[i];
        let d = point_derivs(vars, sw, a, b, nu, false);
        let cap = 2.0 * vars.lambda * sw;
        // same test as ridge_samples
        if nu <= RIDGE_NU * cap {
            let (re, im) = vars.re_im(sw, a, b);
            let q = cap - nu;
            cols[0].push(sw / q + sw);
            for c in cols.iter_mut().skip(1) {
                c.push(0.0);
            }
            ridge.push((i, [-re / nu, -im / nu], 1.0 / cap.sqrt()));
        } else {
            for k in 0..dim {
                cols[k].push(d.gx[k]);
            }
            residual = residual.max((d.gnu * inv_n).abs());
        }
    }
    let mut g = DVector::from_iterator(dim, cols.iter().map(|c| pairwise_sum(c) * inv_n));
    g[0] -= power;
    g[1] += 1.0;
    if !ridge.is_empty() {
        // J maps the stacked w to their gradient contribution
        let mut jac = DMatrix::zeros(dim, 2 * ridge.len());
        let mut w = DVector::zeros(2 * ridge.len());
        for (j, (i, wi, _)) in ridge.iter().enumerate() {
            let (a, b) = grid.basis(*i);
            let sw = grid.sw()[*i];
            let mut dre = vec![2.0 * sw, 1.0];
            dre.extend_from_slice(a);
            let mut dim_ = vec![0.0, 0.0];
            dim_.extend_from_slice(b);
            for k in 0..dim {
                jac[(k, 2 * j)] = dre[k] * inv_n;
                jac[(k, 2 * j + 1)] = dim_[k] * inv_n;
            }
            w[2 * j] = wi[0];
            w[2 * j + 1] = wi[1];
        }
        let base = &g + &jac * &w;
        let correction = jac
            .clone()
            .svd(true, true)
            .solve(&(-&base), 1e-14)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let mut w = w + correction;
        for (j, (_, _, radius)) in ridge.iter().enumerate() {
            let norm = w[2 * j].hypot(w[2 * j + 1]);
            if norm > *radius {
                w[2 * j] *= radius / norm;
                w[2 * j + 1] *= radius / norm;
            }
        }
        g += &jac * &w;
    }
    residual = residual.max(if g[0] < 0.0 { vars.lambda.min(-g[0]) } else { g[0] });
    for k in 1..dim {
        residual = residual.max(g[k].abs());
    }
    Ok(residual)
}

/// Maximizes `g_m` over the grid for input power `power`.
///
/// Path following on `g_m + μ(log λ + mean log ν_i)`: each barrier stage is
/// solved by damped Newton, then `μ` shrinks geometrically down to
/// `barrier_final`. The smoothing keeps the objective differentiable where
/// `r_i² = 0`, which is where the maximizer often lies. Terminates once the
/// KKT residual ([`kkt_residual`]) is below `tol_grad`.
pub fn solve_dual(grid: &FrequencyGrid, power: f64, settings: &SolverSettings) -> Result<DualSolution> {
    settings.validate()?;
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::InvalidArgument(format!("power must be positive, got {power}")));
    }
    let flat = grid.is_flat();
    if flat {
        log::warn!("flat noise spectrum: strong duality assumes a non-flat spectrum");
    }
    let joint = settings.parameterization == Parameterization::Joint;
    let mean_sw = pairwise_sum(grid.sw()) / grid.len() as f64;
    let init = DualVars::new(1.0 / (2.0 * mean_sw), 0.0, vec![0.0; grid.h()]);
    let mut x = pack(&init);
    if joint {
        // mid-domain start, independent of the closed form
        x.extend(grid.sw().iter().map(|s| init.lambda * s));
    }
    newton_ascent(grid, power, settings, x, joint, flat)
}

fn newton_ascent(
    grid: &FrequencyGrid,
    power: f64,
    settings: &SolverSettings,
    mut x: Vec<f64>,
    joint: bool,
    flat: bool,
) -> Result<DualSolution> {
    let local = |x: &[f64], mu: f64| {
        if joint {
            joint_local(x, grid, power, mu)
        } else {
            eliminated_local(x, grid, power, mu)
        }
    };
    let mu_final = settings.barrier_final;
    let mut mu = settings.barrier_init.max(mu_final);
    let mut iterations = 0usize;
    let mut current = local(&x, mu)?;
    loop {
        let final_stage = mu <= mu_final;
        let decrement: f64 = current.grad.iter().zip(&current.step).map(|(g, d)| g * d).sum();
        if final_stage || decrement <= 1e-3 * mu {
            let sol = finish(&x, grid, power, iterations, mu, flat, joint)?;
            if sol.certificate <= settings.tol_grad {
                return Ok(sol);
            }
            if !final_stage {
                mu = (mu * settings.barrier_shrink).max(mu_final);
                current = local(&x, mu)?;
                continue;
            }
        }
        if iterations >= settings.max_iter {
            let best = finish(&x, grid, power, iterations, mu, flat, joint)?;
            return Err(Error::NotConverged { iterations, certificate: best.certificate, best: Box::new(best) });
        }
        iterations += 1;

        let mut t = max_feasible_step(&x, &current.step, grid, joint);
        let slope = decrement.max(0.0);
        let mut accepted = None;
        while t > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(&current.step).map(|(a, d)| a + t * d).collect();
            if let Ok(next) = local(&trial, mu) {
                let tolerance = 4.0 * f64::EPSILON * current.value.abs().max(1.0);
                if next.value.is_finite() && next.value >= current.value + ARMIJO * t * slope - tolerance {
                    accepted = Some((trial, next));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                x = trial;
                current = next;
            }
            None if final_stage => {
                // no further ascent at working precision
                let best = finish(&x, grid, power, iterations, mu, flat, joint)?;
                return Err(Error::NotConverged { iterations, certificate: best.certificate, best: Box::new(best) });
            }
            None => {
                mu = (mu * settings.barrier_shrink).max(mu_final);
                current = local(&x, mu)?;
            }
        }
    }
}

fn finish(
    x: &[f64],
    grid: &FrequencyGrid,
    power: f64,
    iterations: usize,
    mu: f64,
    flat: bool,
    joint: bool,
) -> Result<DualSolution> {
    let dim = grid.h() + 2;
    let vars = unpack(&x[..dim]);
    let point = if joint {
        DualPoint { vars, nu: x[dim..].to_vec() }
    } else {
        smoothed_point(&vars, grid, mu)
    };
    let value_nats = eval_gm(&point, grid, power)?;
    let certificate = kkt_residual(&point, grid, power)?;
    let ridge = ridge_samples(&point, grid);
    Ok(DualSolution { point, value_nats, iterations, certificate, flat_spectrum: flat, ridge })
}

fn smoothed_point(vars: &DualVars, grid: &FrequencyGrid, mu: f64) -> DualPoint {
    let nu = (0..grid.len())
        .map(|i| {
            let (a, b) = grid.basis(i);
            let (re, im) = vars.re_im(grid.sw()[i], a, b);
            let r2 = re * re + im * im;
            // unsmoothed off the ridge
            let cap = 2.0 * vars.lambda * grid.sw()[i];
            match nu_closed_form(r2, vars.lambda, grid.sw()[i]) {
                nu if nu > RIDGE_NU * cap => nu,
                _ => nu_smoothed(r2, vars.lambda, grid.sw()[i], mu),
            }
        })
        .collect();
    DualPoint { vars: vars.clone(), nu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::NoiseModel;

    #[test]
    fn nu_examples() {
        assert_eq!(nu_closed_form(0.0, 1.0, 1.0), 0.0);
        assert!((nu_closed_form(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        // (−4 + √80)/2
        assert!((nu_closed_form(4.0, 2.0, 1.0) - 2.472135954999579).abs() < 1e-14);
        assert!((nu_closed_form(4.0, 1.0, 2.0) - 2.472135954999579).abs() < 1e-14);
    }

    #[test]
    fn nu_closed_form_is_stationary() {
        let grid = FrequencyGrid::new(8, 2, &NoiseModel::moving_average(vec![1.0, 0.4]).unwrap()).unwrap();
        let vars = DualVars::new(0.2, -0.1, vec![0.05, -0.02]);
        let dp = eliminate_nu(&vars, &grid);
        let g = grad_gm(&dp, &grid, 1.0).unwrap();
        for v in g.nu {
            assert!(v.abs() < 1e-13, "dg/dnu = {v}");
        }
    }

    #[test]
    fn flat_hand_evaluation() {
        // S = 1, h = 0, λ = 1/2, η₀ = 0: r² = 1, ν = (√5 − 1)/2
        let nu = (5f64.sqrt() - 1.0) / 2.0;
        let term = 0.5 * (1.0 - nu).ln() + 0.5 - 1.0 / (2.0 * nu) + 0.5;
        let p = 3.0;
        for m in [4, 8] {
            let grid = FrequencyGrid::new(m, 0, &NoiseModel::white()).unwrap();
            let dp = eliminate_nu(&DualVars::new(0.5, 0.0, vec![]), &grid);
            let g = eval_gm(&dp, &grid, p).unwrap();
            assert!((g - (term - 0.5 * p)).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_infeasible_point() {
        let grid = FrequencyGrid::new(4, 1, &NoiseModel::white()).unwrap();
        let mut dp = eliminate_nu(&DualVars::new(0.5, 0.0, vec![0.1]), &grid);
        dp.nu[2] = 2.0;
        assert!(matches!(eval_gm(&dp, &grid, 1.0), Err(Error::InfeasibleDual(_))));
        assert!(matches!(grad_gm(&dp, &grid, 1.0), Err(Error::InfeasibleDual(_))));
    }

    #[test]
    fn awgn_capacity() {
        let grid = FrequencyGrid::new(16, 2, &NoiseModel::white()).unwrap();
        let sol = solve_dual(&grid, 10.0, &SolverSettings::default()).unwrap();
        assert!(sol.flat_spectrum);
        assert!((sol.bound_bits() - 0.5 * 11f64.log2()).abs() < 1e-9);
    }

    #[test]
    fn settings_validation() {
        let grid = FrequencyGrid::new(4, 1, &NoiseModel::white()).unwrap();
        let bad = SolverSettings { tol_grad: 0.0, ..Default::default() };
        assert!(solve_dual(&grid, 1.0, &bad).is_err());
        assert!(solve_dual(&grid, -1.0, &SolverSettings::default()).is_err());
    }

    #[test]
    fn iteration_cap_returns_best_iterate() {
        let grid = FrequencyGrid::new(20, 3, &NoiseModel::moving_average(vec![1.0, 0.1, 0.5]).unwrap()).unwrap();
        let s = SolverSettings { max_iter: 1, ..Default::default() };
        match solve_dual(&grid, 10.0, &s) {
            Err(Error::NotConverged { best, .. }) => assert!(best.point.check_domain(&grid).is_ok()),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn smoothed_nu_solves_barrier_stationarity() {
        for &(r2, lambda, sw, mu) in &[(0.0, 0.3, 1.2, 1e-3), (1e-20, 1.0, 1.0, 1e-9), (4.0, 2.0, 1.0, 0.2), (3.0, 0.1, 0.5, 1e-6)] {
            let nu: f64 = nu_smoothed(r2, lambda, sw, mu);
            let q = 2.0 * lambda * sw - nu;
            assert!(nu > 0.0 && q > 0.0);
            let stationarity = -0.5 / q + r2 / (2.0 * nu * nu) + mu / nu;
            assert!(stationarity.abs() * nu < 1e-12, "{stationarity}");
        }
        assert_eq!(nu_smoothed(4.0, 2.0, 1.0, 0.0), nu_closed_form(4.0, 2.0, 1.0));
    }

    fn example2(h: usize) -> FrequencyGrid {
        FrequencyGrid::new(40, h, &NoiseModel::moving_average(vec![1.0, 0.1, 0.5]).unwrap()).unwrap()
    }

    #[test]
    fn parameterizations_agree() {
        let grid = example2(2);
        let e = solve_dual(&grid, 10.0, &SolverSettings::default()).unwrap();
        let joint = SolverSettings { parameterization: Parameterization::Joint, ..Default::default() };
        let j = solve_dual(&grid, 10.0, &joint).unwrap();
        assert!((e.value_nats - j.value_nats).abs() < 1e-8);
        assert!((e.point.vars.lambda - j.point.vars.lambda).abs() < 1e-6);
        assert!(e.certificate <= 1e-9 && j.certificate <= 1e-9);
        assert!(e.ridge.is_empty());
    }

    #[test]
    fn optimum_on_the_ridge() {
        // the maximizer has r_i² = 0 near θ = π for this channel
        let grid = FrequencyGrid::new(40, 1, &NoiseModel::moving_average(vec![1.0, -0.0234, 0.1081]).unwrap()).unwrap();
        let sol = solve_dual(&grid, 1.0, &SolverSettings::default()).unwrap();
        assert!(sol.certificate <= 1e-9);
        let min_nu = sol.point.nu.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min_nu < 1e-9, "expected a ridge sample, min ν = {min_nu}");
        // r² is even in θ, so ridge samples come in mirrored pairs
        assert_eq!(sol.ridge.len(), 2);
        assert_eq!(grid.mirror(sol.ridge[0]), sol.ridge[1]);
        assert!(sol.point.check_domain(&grid).is_ok());
    }

    #[test]
    fn vanishing_power() {
        let sol = solve_dual(&example2(2), 1e-6, &SolverSettings::default()).unwrap();
        assert!(sol.bound_bits().abs() < 1e-4);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let grid = example2(3);
        let dp = eliminate_nu(&DualVars::new(0.07, -0.05, vec![0.01, -0.02, 0.015]), &grid);
        let g = grad_gm(&dp, &grid, 10.0).unwrap();
        let step = 1e-6;
        let f = |dp: &DualPoint| eval_gm(dp, &grid, 10.0).unwrap();
        let central = |perturb: &dyn Fn(&mut DualPoint, f64)| {
            let (mut hi, mut lo) = (dp.clone(), dp.clone());
            perturb(&mut hi, step);
            perturb(&mut lo, -step);
            (f(&hi) - f(&lo)) / (2.0 * step)
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3);
        assert!(close(g.lambda, central(&|p, d| p.vars.lambda += d)));
        assert!(close(g.eta0, central(&|p, d| p.vars.eta0 += d)));
        for k in 0..3 {
            assert!(close(g.eta[k], central(&|p, d| p.vars.eta[k] += d)));
        }
        for i in [0, 17, 40] {
            let mut moved = dp.clone();
            moved.nu[i] *= 0.7;
            let g = grad_gm(&moved, &grid, 10.0).unwrap();
            let fd = {
                let (mut hi, mut lo) = (moved.clone(), moved.clone());
                hi.nu[i] += step;
                lo.nu[i] -= step;
                (f(&hi) - f(&lo)) / (2.0 * step)
            };
            assert!(close(g.nu[i], fd), "{} vs {fd}", g.nu[i]);
        }
    }
}
