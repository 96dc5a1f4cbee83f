//! From a dual optimum to a strictly causal FIR Youla parameter.
//!
//! The sampled spectrum `1 + a + ib` of the optimal `Q` is read off the dual
//! point, inverted onto the taps `c_1..c_m`, and rescaled so that the input
//! power is exactly `P`. The rate of the resulting scheme is the Bode
//! integral of `log|1 + Q|`, which equals the sum of `log|z|` over the zeros
//! of `1 + Q` outside the unit circle.

use std::f64::consts::{LN_2, PI};
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dualopt::DualSolution;
use crate::error::{Error, Result};
use crate::freqgrid::FrequencyGrid;
use crate::linalg::{monic_roots, pairwise_sum};
use crate::quadrature::adaptive_simpson;
use crate::spectra::{NoiseModel, StateSpace};

/// `ν_i` at or below this is treated as a degenerate dual point.
pub const MIN_NU: f64 = 1e-14;
/// Roots with modulus above `1 + NMP_MARGIN` count as non-minimum-phase.
pub const NMP_MARGIN: f64 = 1e-9;
/// Largest accepted disagreement between the two rate computations, in bits.
pub const RATE_AGREEMENT: f64 = 1e-6;

/// Samples `a_i + i b_i` of `Q(e^{iθ_i})` on the solve grid.
#[derive(Clone, Debug)]
pub struct SampledSpectrum {
    pub grid: FrequencyGrid,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl SampledSpectrum {
    /// `(1/4m) Σ log((1 + a_i)² + b_i²)`, in nats.
    pub fn primal_objective(&self) -> f64 {
        let terms: Vec<f64> = self.a.iter().zip(&self.b).map(|(a, b)| ((1.0 + a).powi(2) + b * b).ln()).collect();
        pairwise_sum(&terms) / (2.0 * self.grid.len() as f64)
    }

    /// `(1/2m) Σ (a_i² + b_i²) S_w(θ_i)`.
    pub fn power(&self) -> f64 {
        let terms: Vec<f64> =
            self.a.iter().zip(&self.b).zip(self.grid.sw()).map(|((a, b), s)| (a * a + b * b) * s).collect();
        pairwise_sum(&terms) / self.grid.len() as f64
    }
}

/// `a_i = re_i/ν_i − 1`, `b_i = im_i/ν_i`.
pub fn recover_ab(sol: &DualSolution, grid: &FrequencyGrid) -> Result<SampledSpectrum> {
    let point = &sol.point;
    if point.nu.len() != grid.len() || point.vars.h() != grid.h() {
        return Err(Error::InvalidArgument("dual point does not match the grid".into()));
    }
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let nu = point.nu[i];
        if !(nu > MIN_NU) {
            return Err(Error::DegenerateDual(format!("nu[{i}] = {nu:e}")));
        }
        let (cos, sin) = grid.basis(i);
        let (re, im) = point.vars.re_im(grid.sw()[i], cos, sin);
        a.push(re / nu - 1.0);
        b.push(im / nu);
    }
    Ok(SampledSpectrum { grid: grid.clone(), a, b })
}

/// `c_n = (1/2m) Σ_i (a_i cos nθ_i − b_i sin nθ_i)` for `n = 1..m`.
///
/// Dropping `n ≤ 0` is the projection onto strictly causal filters.
pub fn fourier_coeffs(sampled: &SampledSpectrum) -> Vec<f64> {
    let grid = &sampled.grid;
    let len = grid.len() as f64;
    (1..=grid.m())
        .map(|n| {
            let terms: Vec<f64> = grid
                .thetas()
                .iter()
                .zip(sampled.a.iter().zip(&sampled.b))
                .map(|(t, (a, b))| {
                    let (s, c) = (n as f64 * t).sin_cos();
                    a * c - b * s
                })
                .collect();
            pairwise_sum(&terms) / len
        })
        .collect()
}

/// Strictly causal FIR filter `Σ_{n=1}^{len} coeffs[n-1] z^{-n}`.
///
/// `coeffs` already include the power scale `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub coeffs: Vec<f64>,
    pub alpha: f64,
}

impl FirFilter {
    pub fn new(coeffs: Vec<f64>) -> Self {
        FirFilter { coeffs, alpha: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Impulse response including the structural zero at lag 0.
    pub fn taps(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.coeffs.iter().copied()).collect()
    }

    pub fn to_state_space(&self) -> StateSpace {
        StateSpace::fir(&self.taps())
    }

    /// `Q(z)` at an arbitrary point, by Horner in `z⁻¹`.
    pub fn eval(&self, z: Complex64) -> Complex64 {
        let zinv = z.inv();
        self.coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| (acc + c) * zinv)
    }

    pub fn freq_response(&self, theta: f64) -> Complex64 {
        self.eval(Complex64::from_polar(1.0, theta))
    }

    /// CSV rows `n,c_n` for `n = 1..len`.
    pub fn impulse_csv(&self) -> String {
        let mut out = String::from("n,c_n\n");
        for (n, c) in self.coeffs.iter().enumerate() {
            let _ = writeln!(out, "{},{:.17e}", n + 1, c);
        }
        out
    }
}

/// Input power `(1/2π)∫|Q|² S_w dθ`, the squared H₂ norm of `Q H`.
pub fn power_of_filter(fir: &FirFilter, model: &NoiseModel) -> Result<f64> {
    fir.to_state_space().series(&model.to_state_space()).h2_norm_sq()
}

/// Rescales `fir` so that its input power is exactly `power`.
pub fn power_scale(fir: &FirFilter, model: &NoiseModel, power: f64) -> Result<FirFilter> {
    let p = power_of_filter(fir, model)?;
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::DegenerateFilter);
    }
    let alpha = (power / p).sqrt();
    Ok(FirFilter { coeffs: fir.coeffs.iter().map(|c| c * alpha).collect(), alpha: fir.alpha * alpha })
}

/// Rate of the scheme built on a filter, in bits per channel use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    /// Reported value: the root sum when available and consistent.
    pub bits: f64,
    pub by_roots: Option<f64>,
    pub by_quadrature: f64,
    pub quad_error_estimate: f64,
}

impl Rate {
    pub fn discrepancy(&self) -> Option<f64> {
        self.by_roots.map(|r| (r - self.by_quadrature).abs())
    }
}

/// Sum of `log₂|z|` over roots of `z^m + c_1 z^{m−1} + ... + c_m` outside the
/// unit circle.
pub fn rate_from_roots(fir: &FirFilter) -> Result<f64> {
    let roots = monic_roots(&fir.coeffs)?;
    let bits: Vec<f64> = roots.iter().map(|z| z.norm()).filter(|r| *r > 1.0 + NMP_MARGIN).map(f64::log2).collect();
    Ok(pairwise_sum(&bits))
}

/// `(1/2π)∫ log₂|1 + Q(e^{iθ})| dθ` by adaptive quadrature.
pub fn rate_from_quadrature(fir: &FirFilter, tol: f64) -> Result<(f64, f64)> {
    let panels = 4 * fir.len().max(4);
    // even integrand: integrate over [0, π]
    let q = adaptive_simpson(|t| (1.0 + fir.freq_response(t)).norm().ln(), 0.0, PI, tol * PI * LN_2, panels)?;
    Ok((q.value / (PI * LN_2), q.error_estimate / (PI * LN_2)))
}

/// Rate computed by roots and by quadrature. Falls back to the quadrature
/// value, with a warning, when root finding fails or the two disagree.
pub fn achievable_rate(fir: &FirFilter) -> Result<Rate> {
    if fir.coeffs.iter().all(|c| *c == 0.0) {
        return Ok(Rate { bits: 0.0, by_roots: Some(0.0), by_quadrature: 0.0, quad_error_estimate: 0.0 });
    }
    let (by_quadrature, quad_error_estimate) = match rate_from_quadrature(fir, 1e-11) {
        Ok(v) => v,
        // a zero of 1 + Q on the unit circle makes the integrand singular
        Err(Error::Quadrature { estimate, error_bound }) => (estimate / (PI * LN_2), error_bound / (PI * LN_2)),
        Err(e) => return Err(e),
    };
    let by_roots = match rate_from_roots(fir) {
        Ok(v) if v.is_finite() => Some(v),
        Ok(_) | Err(_) => None,
    };
    let bits = match by_roots {
        Some(r) if (r - by_quadrature).abs() <= RATE_AGREEMENT => r,
        Some(r) => {
            log::warn!("rate by roots {r} and by quadrature {by_quadrature} disagree; using quadrature");
            by_quadrature
        }
        None => {
            log::warn!("root finding failed; rate from quadrature only");
            by_quadrature
        }
    };
    Ok(Rate { bits, by_roots, by_quadrature, quad_error_estimate })
}

/// Power-scaled filter and its rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub filter: FirFilter,
    pub rate: Rate,
}

/// `recover_ab → fourier_coeffs → power_scale → achievable_rate`.
pub fn synthesize(sol: &DualSolution, grid: &FrequencyGrid, model: &NoiseModel, power: f64) -> Result<Synthesis> {
    let sampled = recover_ab(sol, grid)?;
    let raw = FirFilter::new(fourier_coeffs(&sampled));
    let filter = power_scale(&raw, model, power)?;
    let rate = achievable_rate(&filter)?;
    Ok(Synthesis { filter, rate })
}
