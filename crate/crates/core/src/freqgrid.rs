//! Uniform frequency grid, trigonometric causality basis and the `r²(θ)`
//! term of the dual objective.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::NoiseModel;

/// The `2m` points `θ_i = -π + (π/m)(i-1)` together with cached `S_w(θ_i)`
/// and the trigonometric basis needed by `h` causality constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    m: usize,
    h: usize,
    thetas: Vec<f64>,
    sw: Vec<f64>,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl FrequencyGrid {
    pub fn new(m: usize, h: usize, model: &NoiseModel) -> Result<Self> {
        Self::from_density(m, h, |t| model.psd(t))
    }

    /// Grid over an arbitrary positive spectral density.
    pub fn from_density<F: Fn(f64) -> f64>(m: usize, h: usize, density: F) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("grid half-resolution m must be at least 1".into()));
        }
        let thetas: Vec<f64> = (0..2 * m).map(|i| -PI + PI / m as f64 * i as f64).collect();
        let sw: Vec<f64> = thetas.iter().map(|&t| density(t)).collect();
        if let Some(bad) = sw.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spectral density sample {bad} is not positive")));
        }
        let (cos, sin) = thetas.iter().map(|&t| trig_basis(h, t)).unzip();
        Ok(FrequencyGrid { m, h, thetas, sw, cos, sin })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn sw(&self) -> &[f64] {
        &self.sw
    }

    /// `(A(θ_i), B(θ_i))`.
    pub fn basis(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.cos[i], &self.sin[i])
    }

    /// Index of the grid point `-θ_i` (the grid is symmetric about zero
    /// with `-π` and `0` paired to themselves).
    pub fn mirror(&self, i: usize) -> usize {
        (2 * self.m - i) % (2 * self.m)
    }

    pub fn is_flat(&self) -> bool {
        let max = self.sw.iter().cloned().fold(0.0, f64::max);
        let min = self.sw.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min <= 1e-12 * max
    }
}

pub fn build_grid(m: usize, h: usize, model: &NoiseModel) -> Result<FrequencyGrid> {
    FrequencyGrid::new(m, h, model)
}

/// `A_k = cos(kθ)`, `B_k = sin(kθ)` for `k = 1..=h`.
pub fn trig_basis(h: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    (1..=h).map(|k| ((k as f64) * theta).sin_cos()).map(|(s, c)| (c, s)).unzip()
}

/// Power multiplier `λ`, causality multipliers `η₁..η_h` and `η₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    pub lambda: f64,
    pub eta0: f64,
    pub eta: Vec<f64>,
}

impl DualVars {
    pub fn new(lambda: f64, eta0: f64, eta: Vec<f64>) -> Self {
        DualVars { lambda, eta0, eta }
    }

    pub fn h(&self) -> usize {
        self.eta.len()
    }

    /// Real and imaginary parts `(2λS + η'A + η₀, η'B)` whose squared modulus is `r²`.
    pub fn re_im(&self, sw: f64, cos: &[f64], sin: &[f64]) -> (f64, f64) {
        let mut re = 2.0 * self.lambda * sw + self.eta0;
        let mut im = 0.0;
        for ((e, c), s) in self.eta.iter().zip(cos).zip(sin) {
            re += e * c;
            im += e * s;
        }
        (re, im)
    }
}

/// A full point of the discretized dual, including the per-sample `ν_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    #[serde(flatten)]
    pub vars: DualVars,
    pub nu: Vec<f64>,
}

impl DualPoint {
    /// Checks `λ ≥ 0` and `0 < ν_i < 2λ S_w(θ_i)` against `grid`.
    pub fn check_domain(&self, grid: &FrequencyGrid) -> Result<()> {
        if self.vars.eta.len() != grid.h() || self.nu.len() != grid.len() {
            return Err(Error::InfeasibleDual("dimension mismatch with grid".into()));
        }
        if !(self.vars.lambda >= 0.0) {
            return Err(Error::InfeasibleDual(format!("lambda = {}", self.vars.lambda)));
        }
        for (i, (&nu, &s)) in self.nu.iter().zip(grid.sw()).enumerate() {
            if !(nu > 0.0 && nu < 2.0 * self.vars.lambda * s) {
                return Err(Error::InfeasibleDual(format!("nu[{i}] = {nu} outside (0, {})", 2.0 * self.vars.lambda * s)));
            }
        }
        Ok(())
    }
}

/// `r²(θ) = (2λS_w + η'A(θ) + η₀)² + (η'B(θ))²`.
pub fn r_squared(vars: &DualVars, theta: f64, sw: f64) -> f64 {
    let (a, b) = trig_basis(vars.h(), theta);
    let (re, im) = vars.re_im(sw, &a, &b);
    re * re + im * im
}
