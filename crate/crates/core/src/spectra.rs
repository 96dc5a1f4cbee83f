//! Rational noise-shaping filters and discrete-time state-space systems.
//!
//! A [`NoiseModel`] is the shaping filter `H(z)` driven by unit-variance
//! white Gaussian noise; its power spectral density is `|H(e^{iθ})|²`.
//! Coefficients are stored in powers of `z⁻¹`, constant term first.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Denominator roots must have modulus below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-8;
const POSITIVITY_GRID: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct NoiseModel {
    num: Vec<f64>,
    den: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    num: Vec<f64>,
    #[serde(default = "unit_den")]
    den: Vec<f64>,
}

fn unit_den() -> Vec<f64> {
    vec![1.0]
}

impl TryFrom<RawModel> for NoiseModel {
    type Error = Error;
    fn try_from(raw: RawModel) -> Result<Self> {
        NoiseModel::new(raw.num, raw.den)
    }
}

impl From<NoiseModel> for RawModel {
    fn from(m: NoiseModel) -> Self {
        RawModel { num: m.num, den: m.den }
    }
}

fn trim_trailing_zeros(mut v: Vec<f64>) -> Vec<f64> {
    while v.len() > 1 && v.last() == Some(&0.0) {
        v.pop();
    }
    v
}

/// Evaluates `Σ coeffs[k] z^{-k}` at `z = e^{iθ}`.
pub(crate) fn eval_in_zinv(coeffs: &[f64], theta: f64) -> Complex64 {
    let zinv = Complex64::from_polar(1.0, -theta);
    // Horner in z^{-1}
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * zinv + c)
}

impl NoiseModel {
    /// Builds and validates a shaping filter. The denominator is normalized
    /// so that its constant term is one.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if num.is_empty() || den.is_empty() {
            return Err(Error::InvalidModel("empty coefficient list".into()));
        }
        if num.iter().chain(&den).any(|c| !c.is_finite()) {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        if den[0] == 0.0 {
            return Err(Error::InvalidModel("denominator constant term is zero".into()));
        }
        if num[0] == 0.0 {
            return Err(Error::InvalidModel(
                "numerator constant term must be nonzero".into(),
            ));
        }
        let d0 = den[0];
        let num = trim_trailing_zeros(num.into_iter().map(|c| c / d0).collect());
        let den = trim_trailing_zeros(den.into_iter().map(|c| c / d0).collect());

        let radius = linalg::spectral_radius(&companion(&den))?;
        if radius >= 1.0 - STABILITY_MARGIN {
            return Err(Error::InvalidModel(format!(
                "denominator root of modulus {radius} is not strictly inside the unit disc"
            )));
        }
        let model = NoiseModel { num, den };
        let samples: Vec<f64> = (0..POSITIVITY_GRID)
            .map(|i| model.psd(-PI + 2.0 * PI * i as f64 / POSITIVITY_GRID as f64))
            .collect();
        let max = samples.iter().cloned().fold(0.0, f64::max);
        let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-12 * max) {
            return Err(Error::InvalidModel(
                "power spectral density is not strictly positive".into(),
            ));
        }
        Ok(model)
    }

    /// Moving-average filter `num[0] + num[1] z⁻¹ + ...`.
    pub fn moving_average(num: Vec<f64>) -> Result<Self> {
        Self::new(num, vec![1.0])
    }

    pub fn white() -> Self {
        NoiseModel { num: vec![1.0], den: vec![1.0] }
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn response(&self, theta: f64) -> Complex64 {
        eval_in_zinv(&self.num, theta) / eval_in_zinv(&self.den, theta)
    }

    /// `S_w(θ) = |H(e^{iθ})|²`.
    pub fn psd(&self, theta: f64) -> f64 {
        self.response(theta).norm_sqr()
    }

    /// True when the spectral density is constant in frequency.
    pub fn is_flat(&self) -> bool {
        let samples: Vec<f64> = (0..64).map(|i| self.psd(PI * i as f64 / 63.0)).collect();
        let max = samples.iter().cloned().fold(0.0, f64::max);
        let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min <= 1e-12 * max
    }

    /// Controllable canonical realization of `H(z)`.
    pub fn to_state_space(&self) -> StateSpace {
        let n = self.num.len().max(self.den.len()) - 1;
        let coef = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
        let b0 = self.num[0];
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            a[(0, j)] = -coef(&self.den, j + 1);
        }
        for i in 1..n {
            a[(i, i - 1)] = 1.0;
        }
        let mut b = DMatrix::zeros(n, 1);
        if n > 0 {
            b[(0, 0)] = 1.0;
        }
        let c = DMatrix::from_fn(1, n, |_, j| coef(&self.num, j + 1) - b0 * coef(&self.den, j + 1));
        let d = DMatrix::from_element(1, 1, b0);
        StateSpace { a, b, c, d }
    }
}

fn companion(den: &[f64]) -> DMatrix<f64> {
    let n = den.len() - 1;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(0, j)] = -den[j + 1];
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    a
}

/// `S_w(θ)` for a validated model.
pub fn eval_psd(model: &NoiseModel, theta: f64) -> f64 {
    model.psd(theta)
}

pub fn to_state_space(model: &NoiseModel) -> StateSpace {
    model.to_state_space()
}

/// Discrete-time system `x⁺ = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "crate::serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let consistent = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && d.nrows() == c.nrows()
            && d.ncols() == b.ncols();
        if !consistent {
            return Err(Error::InvalidArgument(format!(
                "inconsistent state-space dimensions: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(StateSpace { a, b, c, d })
    }

    /// Static SISO gain.
    pub fn gain(d: f64) -> Self {
        StateSpace {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 1),
            c: DMatrix::zeros(1, 0),
            d: DMatrix::from_element(1, 1, d),
        }
    }

    /// Tapped-delay-line realization of `Σ_{k≥0} taps[k] z^{-k}`.
    pub fn fir(taps: &[f64]) -> Self {
        let n = taps.len().saturating_sub(1);
        let mut a = DMatrix::zeros(n, n);
        for i in 1..n {
            a[(i, i - 1)] = 1.0;
        }
        let mut b = DMatrix::zeros(n, 1);
        if n > 0 {
            b[(0, 0)] = 1.0;
        }
        let c = DMatrix::from_fn(1, n, |_, j| taps[j + 1]);
        let d = DMatrix::from_element(1, 1, taps.first().copied().unwrap_or(0.0));
        StateSpace { a, b, c, d }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        linalg::spectral_radius(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius().map(|r| r < 1.0).unwrap_or(false)
    }

    pub fn poles(&self) -> Result<Vec<Complex64>> {
        linalg::eigenvalues(&self.a)
    }

    /// SISO transfer function `C (zI - A)⁻¹ B + D` at an arbitrary `z`.
    pub fn transfer_at(&self, z: Complex64) -> Complex64 {
        let n = self.order();
        let d = Complex64::new(self.d[(0, 0)], 0.0);
        if n == 0 {
            return d;
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j { z } else { Complex64::new(0.0, 0.0) };
            diag - self.a[(i, j)]
        });
        let rhs = DVector::from_fn(n, |i, _| Complex64::new(self.b[(i, 0)], 0.0));
        match m.lu().solve(&rhs) {
            Some(x) => {
                (0..n).map(|j| x[j] * self.c[(0, j)]).sum::<Complex64>() + d
            }
            None => Complex64::new(f64::INFINITY, f64::INFINITY),
        }
    }

    /// Frequency response at `z = e^{iθ}`.
    pub fn freq_response(&self, theta: f64) -> Complex64 {
        self.transfer_at(Complex64::from_polar(1.0, theta))
    }

    /// First `len` Markov parameters `D, CB, CAB, ...`.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(self.d[(0, 0)]);
        let mut x = self.b.column(0).clone_owned();
        for _ in 1..len {
            out.push((self.c.row(0) * &x)[(0, 0)]);
            x = &self.a * x;
        }
        out
    }

    /// Series connection: the output of `self` drives `next`.
    pub fn series(&self, next: &StateSpace) -> StateSpace {
        let (n1, n2) = (self.order(), next.order());
        let n = n1 + n2;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, 0), (n2, n1)).copy_from(&(&next.b * &self.c));
        a.view_mut((n1, n1), (n2, n2)).copy_from(&next.a);
        let mut b = DMatrix::zeros(n, self.b.ncols());
        b.view_mut((0, 0), (n1, self.b.ncols())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.b.ncols())).copy_from(&(&next.b * &self.d));
        let mut c = DMatrix::zeros(next.c.nrows(), n);
        c.view_mut((0, 0), (next.c.nrows(), n1)).copy_from(&(&next.d * &self.c));
        c.view_mut((0, n1), (next.c.nrows(), n2)).copy_from(&next.c);
        let d = &next.d * &self.d;
        StateSpace { a, b, c, d }
    }

    /// Squared H₂ norm `tr(C W C') + tr(D D')`, with `W = A W A' + B B'`.
    pub fn h2_norm_sq(&self) -> Result<f64> {
        let radius = self.spectral_radius()?;
        if radius >= 1.0 {
            return Err(Error::NotH2(radius));
        }
        let w = linalg::dlyap(&self.a, &(&self.b * self.b.transpose()))?;
        let cwc = &self.c * w * self.c.transpose();
        Ok(cwc.trace() + (&self.d * self.d.transpose()).trace())
    }
}

pub fn h2_norm_sq(ss: &StateSpace) -> Result<f64> {
    ss.h2_norm_sq()
}

/// Stationary sample path of length `n` of the noise generated by `model`.
///
/// The initial state is drawn from the stationary state covariance so that
/// the path has no start-up transient.
pub fn sample_noise(model: &NoiseModel, n: usize, seed: u64) -> Vec<f64> {
    let ss = model.to_state_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let order = ss.order();
    let mut x = if order > 0 {
        let cov = linalg::dlyap(&ss.a, &(&ss.b * ss.b.transpose()))
            .expect("validated noise models are stable");
        let factor = linalg::psd_factor(&cov);
        let xi = DVector::from_fn(order, |_, _| normal());
        factor * xi
    } else {
        DVector::zeros(0)
    };
    let d = ss.d[(0, 0)];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let e = normal();
        let w = if order > 0 { (ss.c.row(0) * &x)[(0, 0)] } else { 0.0 } + d * e;
        out.push(w);
        if order > 0 {
            x = &ss.a * x + ss.b.column(0) * e;
        }
    }
    out
}
