//! Youla controller, its stable/unstable split, and the feedback coding
//! scheme built on the split.
//!
//! Loop convention: the plant is the unity channel `y = u + w` and the
//! controller closes the loop as `u = -K y`. With `K = -Q(1+Q)⁻¹` this gives
//! sensitivity `(1+K)⁻¹ = 1+Q` and complementary sensitivity
//! `K(1+K)⁻¹ = -Q`; the loop itself has the poles of `Q`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, pairwise_sum};
use crate::spectra::{sample_noise, NoiseModel, StateSpace};
use crate::synthesis::FirFilter;

/// Eigenvalues with `||λ| - 1|` below this cannot be assigned to either side.
pub const MARGINAL_BAND: f64 = 1e-6;
const SIGN_TOL: f64 = 1e-14;
const SIGN_MAX_ITER: usize = 100;
const DECOUPLE_TOL: f64 = 1e-15;
const DECOUPLE_ACCEPT: f64 = 1e-11;
const DECOUPLE_MAX_ITER: usize = 20;
const MAX_AXIS_BITS: u32 = 52;

/// `K = -Q(1+Q)⁻¹` for a strictly proper `Q = (A, B, C, 0)`, realized as
/// `(A - BC, B, -C, 0)`. Same order as `Q`.
pub fn controller_from_parameter(q: &StateSpace) -> Result<StateSpace> {
    if q.d[(0, 0)] != 0.0 {
        return Err(Error::InvalidArgument("Youla parameter must be strictly proper".into()));
    }
    let a = &q.a - &q.b * &q.c;
    StateSpace::new(a, q.b.clone(), -&q.c, DMatrix::zeros(1, 1))
}

/// Controller for an FIR Youla parameter; order equals the filter length.
pub fn youla_controller(fir: &FirFilter) -> StateSpace {
    controller_from_parameter(&fir.to_state_space()).expect("FIR parameters are strictly proper")
}

/// `(1+K)⁻¹`, the map from channel noise to channel output.
pub fn sensitivity(k: &StateSpace) -> Result<StateSpace> {
    loop_map(k, false)
}

/// `K(1+K)⁻¹`, the map from channel noise to the controller output.
pub fn complementary_sensitivity(k: &StateSpace) -> Result<StateSpace> {
    loop_map(k, true)
}

fn loop_map(k: &StateSpace, controller_output: bool) -> Result<StateSpace> {
    let d = k.d[(0, 0)];
    let g = 1.0 + d;
    if g == 0.0 {
        return Err(Error::InvalidArgument("ill-posed loop: 1 + K(∞) = 0".into()));
    }
    let a = &k.a - &k.b * &k.c / g;
    let b = &k.b / g;
    let (c, dd) = if controller_output { (&k.c / g, d / g) } else { (-&k.c / g, 1.0 / g) };
    StateSpace::new(a, b, c, DMatrix::from_element(1, 1, dd))
}

/// State matrix of the closed loop `u = -K y`, `y = u + w`.
pub fn closed_loop_matrix(k: &StateSpace) -> Result<DMatrix<f64>> {
    Ok(sensitivity(k)?.a)
}

/// Largest closed-loop eigenvalue modulus.
pub fn closed_loop_radius(k: &StateSpace) -> Result<f64> {
    linalg::spectral_radius(&closed_loop_matrix(k)?)
}

/// Controller in block-diagonal form `diag(A_s, A_u)` with `B`, `C` split
/// to match, plus the similarity used: `x = T [x_s; x_u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodingScheme {
    #[serde(with = "crate::serde_matrix")]
    pub a_s: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub a_u: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub b_s: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub b_u: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub c_s: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub c_u: DMatrix<f64>,
    /// Eigenvalues of `a_u` as `[re, im]`.
    pub unstable_eigs: Vec<[f64; 2]>,
    /// `Σ log₂|λ|` over `unstable_eigs`.
    pub rate_bits: f64,
    pub message_dim: usize,
    #[serde(with = "crate::serde_matrix")]
    pub transform: DMatrix<f64>,
}

impl CodingScheme {
    /// The controller reassembled from its blocks.
    pub fn controller(&self) -> StateSpace {
        let (ns, nu) = (self.a_s.nrows(), self.a_u.nrows());
        let n = ns + nu;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (ns, ns)).copy_from(&self.a_s);
        a.view_mut((ns, ns), (nu, nu)).copy_from(&self.a_u);
        let mut b = DMatrix::zeros(n, 1);
        b.view_mut((0, 0), (ns, 1)).copy_from(&self.b_s);
        b.view_mut((ns, 0), (nu, 1)).copy_from(&self.b_u);
        let mut c = DMatrix::zeros(1, n);
        c.view_mut((0, 0), (1, ns)).copy_from(&self.c_s);
        c.view_mut((0, ns), (1, nu)).copy_from(&self.c_u);
        StateSpace { a, b, c, d: DMatrix::zeros(1, 1) }
    }

    pub fn unstable_eigenvalues(&self) -> Vec<Complex64> {
        self.unstable_eigs.iter().map(|[re, im]| Complex64::new(*re, *im)).collect()
    }
}

/// Matrix sign function by the scaled Newton iteration.
fn matrix_sign(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut s = m;
    for _ in 0..SIGN_MAX_ITER {
        let inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix sign function".into()))?;
        let det = s.clone().lu().determinant().abs();
        let scale = if det.is_finite() && det > 0.0 { det.powf(-1.0 / n as f64) } else { 1.0 };
        let next = (&s * scale + inv / scale) * 0.5;
        let change = (&next - &s).norm();
        let size = next.norm();
        s = next;
        if change <= SIGN_TOL * size.max(1.0) * n as f64 {
            return Ok(s);
        }
    }
    // finish unscaled: scaling can stall once the iterate is near an involution
    for _ in 0..SIGN_MAX_ITER {
        let inv = s.clone().try_inverse().ok_or_else(|| Error::Numerical("singular sign iterate".into()))?;
        let next = (&s + inv) * 0.5;
        let change = (&next - &s).norm();
        s = next;
        if change <= SIGN_TOL * s.norm().max(1.0) * n as f64 {
            return Ok(s);
        }
    }
    Err(Error::Numerical("matrix sign iteration did not converge".into()))
}

/// Orthonormal basis of the range of a projector of known rank.
fn range_basis(p: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let svd = p.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("projector SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(DMatrix::from_fn(p.nrows(), rank, |i, k| u[(i, order[k])]))
}

/// Polishes a block split of `a` by Sylvester corrections until the
/// off-diagonal blocks vanish to rounding. Returns the similarity and the
/// transformed matrix.
fn decouple(a: &DMatrix<f64>, mut t: DMatrix<f64>, n_s: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let n_u = n - n_s;
    let scale = a.norm().max(1.0);
    let mut previous = f64::INFINITY;
    for _ in 0..DECOUPLE_MAX_ITER {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("stable and unstable subspaces are not complementary".into()))?;
        let at = &t_inv * a * &t;
        if n_s == 0 || n_u == 0 {
            return Ok((t, at));
        }
        let a11 = at.view((0, 0), (n_s, n_s)).clone_owned();
        let a12 = at.view((0, n_s), (n_s, n_u)).clone_owned();
        let a21 = at.view((n_s, 0), (n_u, n_s)).clone_owned();
        let a22 = at.view((n_s, n_s), (n_u, n_u)).clone_owned();
        let coupling = a12.norm() + a21.norm();
        if coupling <= DECOUPLE_TOL * scale {
            return Ok((t, at));
        }
        // stagnation at rounding level
        if coupling >= 0.5 * previous {
            if coupling <= DECOUPLE_ACCEPT * scale {
                return Ok((t, at));
            }
            return Err(Error::Numerical(format!("spectral split left off-diagonal coupling {coupling:e}")));
        }
        previous = coupling;
        // [I 0; X I] clears the lower-left block to first order
        let x = linalg::sylvester(&a22, &(-&a11), &(-&a21))?;
        let b11 = &a11 + &a12 * &x;
        let b22 = &a22 - &x * &a12;
        // [I Y; 0 I] then clears the upper-right block
        let y = linalg::sylvester(&b11, &(-&b22), &(-&a12))?;
        let mut step = DMatrix::identity(n, n);
        step.view_mut((n_s, 0), (n_u, n_s)).copy_from(&x);
        let mut upper = DMatrix::identity(n, n);
        upper.view_mut((0, n_s), (n_s, n_u)).copy_from(&y);
        t = t * step * upper;
    }
    let t_inv = t.clone().try_inverse().ok_or_else(|| Error::Numerical("singular split transform".into()))?;
    let at = &t_inv * a * &t;
    let coupling = at.view((0, n_s), (n_s, n_u)).norm() + at.view((n_s, 0), (n_u, n_s)).norm();
    Err(Error::Numerical(format!("spectral split left off-diagonal coupling {coupling:e}")))
}

/// Splits a strictly proper controller into its stable and unstable parts.
///
/// The unstable invariant subspace comes from the sign function of the
/// Cayley transform `(A - I)⁻¹(A + I)`, which maps `|λ| > 1` to the right
/// half plane.
pub fn stable_unstable_split(k: &StateSpace) -> Result<CodingScheme> {
    if k.d[(0, 0)] != 0.0 {
        return Err(Error::InvalidArgument("coding scheme needs a strictly proper controller".into()));
    }
    let n = k.order();
    let eigs = linalg::eigenvalues(&k.a)?;
    if let Some(z) = eigs.iter().find(|z| (z.norm() - 1.0).abs() < MARGINAL_BAND) {
        return Err(Error::MarginalMode(z.norm()));
    }
    let n_u = eigs.iter().filter(|z| z.norm() > 1.0).count();
    let n_s = n - n_u;

    let transform = if n_u == 0 || n_s == 0 {
        DMatrix::identity(n, n)
    } else {
        let eye = DMatrix::<f64>::identity(n, n);
        let cayley = (&k.a - &eye)
            .try_inverse()
            .ok_or(Error::MarginalMode(1.0))?
            * (&k.a + &eye);
        let sign = matrix_sign(cayley)?;
        let basis_s = range_basis(&((&eye - &sign) * 0.5), n_s)?;
        let basis_u = range_basis(&((&eye + &sign) * 0.5), n_u)?;
        let mut t = DMatrix::zeros(n, n);
        t.view_mut((0, 0), (n, n_s)).copy_from(&basis_s);
        t.view_mut((0, n_s), (n, n_u)).copy_from(&basis_u);
        t
    };
    let (transform, a) = decouple(&k.a, transform, n_s)?;
    let t_inv = transform
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("stable and unstable subspaces are not complementary".into()))?;
    let b = &t_inv * &k.b;
    let c = &k.c * &transform;

    let a_s = a.view((0, 0), (n_s, n_s)).clone_owned();
    let a_u = a.view((n_s, n_s), (n_u, n_u)).clone_owned();
    let unstable: Vec<Complex64> = linalg::eigenvalues(&a_u)?;
    let rate_bits = pairwise_sum(&unstable.iter().map(|z| z.norm().log2()).collect::<Vec<_>>());
    Ok(CodingScheme {
        a_s,
        b_s: b.rows(0, n_s).clone_owned(),
        b_u: b.rows(n_s, n_u).clone_owned(),
        c_s: c.columns(0, n_s).clone_owned(),
        c_u: c.columns(n_s, n_u).clone_owned(),
        a_u,
        unstable_eigs: unstable.iter().map(|z| [z.re, z.im]).collect(),
        rate_bits,
        message_dim: n_u,
        transform,
    })
}

/// Bits per axis of the message hypercube: `n_bits` shared in proportion to
/// `log₂|λ_i|` by largest remainder, ties to the lower axis index.
pub fn bit_allocation(scheme: &CodingScheme, n_bits: u32) -> Result<Vec<u32>> {
    if scheme.message_dim == 0 {
        return Err(Error::Encoding("scheme has no unstable modes".into()));
    }
    let weights: Vec<f64> = scheme.unstable_eigenvalues().iter().map(|z| z.norm().log2()).collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n_bits as f64 * w / total).collect();
    let mut bits: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let mut left = n_bits - bits.iter().sum::<u32>();
    let mut by_remainder: Vec<usize> = (0..bits.len()).collect();
    by_remainder.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        bits[i] += 1;
        left -= 1;
    }
    if let Some(b) = bits.iter().find(|b| **b > MAX_AXIS_BITS) {
        return Err(Error::Encoding(format!("{b} bits on one axis exceed double precision")));
    }
    Ok(bits)
}

/// Centroid of the `message`-th cell (1-based) of the dyadic partition of
/// `[-½, ½]^d`. Axis 0 holds the least significant digits.
pub fn encode_message(scheme: &CodingScheme, message: u64, n_bits: u32) -> Result<DVector<f64>> {
    if n_bits >= 64 {
        return Err(Error::Encoding(format!("{n_bits} message bits do not fit an index")));
    }
    let count = 1u64 << n_bits;
    if message == 0 || message > count {
        return Err(Error::Encoding(format!("message {message} outside 1..={count}")));
    }
    let bits = bit_allocation(scheme, n_bits)?;
    let mut index = message - 1;
    Ok(DVector::from_iterator(
        bits.len(),
        bits.iter().map(|&b| {
            let cells = 1u64 << b;
            let digit = index % cells;
            index /= cells;
            -0.5 + (digit as f64 + 0.5) / cells as f64
        }),
    ))
}

/// Message whose cell centroid is nearest to `estimate`.
pub fn decode_message(scheme: &CodingScheme, estimate: &DVector<f64>, n_bits: u32) -> Result<u64> {
    let bits = bit_allocation(scheme, n_bits)?;
    if estimate.len() != bits.len() {
        return Err(Error::Encoding("estimate dimension does not match the scheme".into()));
    }
    let mut index = 0u64;
    let mut place = 1u64;
    for (x, &b) in estimate.iter().zip(&bits) {
        let cells = 1u64 << b;
        let cell = ((x + 0.5) * cells as f64).floor();
        let digit = if cell.is_nan() { 0 } else { cell.clamp(0.0, (cells - 1) as f64) as u64 };
        index += digit * place;
        place = place.saturating_mul(cells);
    }
    Ok(index + 1)
}

/// Trajectories of one closed-loop run.
#[derive(Clone, Debug)]
pub struct LoopTrace {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    /// Decoder estimates `x̂_{u,0}(k)`, `k = 0..=n`; `-x̂_{u,0}` estimates
    /// the encoder's initial state.
    pub initial_state_estimates: Vec<DVector<f64>>,
}

impl LoopTrace {
    pub fn final_estimate(&self) -> &DVector<f64> {
        self.initial_state_estimates.last().expect("trace holds the k = 0 estimate")
    }
}

/// Encoder, decoder and channel stepped together.
///
/// The encoder's `ũ_u` and the decoder's `û` each grow like `A_uᵏ` and
/// cancel in `u`; the loop is carried in the summed state `x̃_u + x̂_u`,
/// which stays bounded. The decoder's initial-state estimate only sees `y`.
struct Transmission<'a> {
    scheme: &'a CodingScheme,
    a_u_inv: DMatrix<f64>,
    x_s: DVector<f64>,
    x_u: DVector<f64>,
    /// `A_u^{-k}`
    back: DMatrix<f64>,
    estimate: DVector<f64>,
}

impl<'a> Transmission<'a> {
    fn new(scheme: &'a CodingScheme, x_u0: &DVector<f64>) -> Result<Self> {
        let n_u = scheme.message_dim;
        if x_u0.len() != n_u {
            return Err(Error::InvalidArgument(format!("initial state has dimension {}, scheme needs {n_u}", x_u0.len())));
        }
        let a_u_inv = scheme
            .a_u
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("unstable block is singular".into()))?;
        Ok(Transmission {
            scheme,
            a_u_inv,
            x_s: DVector::zeros(scheme.a_s.nrows()),
            x_u: x_u0.clone(),
            back: DMatrix::identity(n_u, n_u),
            estimate: DVector::zeros(n_u),
        })
    }

    /// One channel use with noise sample `w`; returns `(y, u)`.
    fn step(&mut self, w: f64) -> (f64, f64) {
        let s = self.scheme;
        let u = -((&s.c_s * &self.x_s)[(0, 0)] + (&s.c_u * &self.x_u)[(0, 0)]);
        let y = u + w;
        self.x_s = &s.a_s * &self.x_s + s.b_s.column(0) * y;
        self.x_u = &s.a_u * &self.x_u + s.b_u.column(0) * y;
        self.back = &self.a_u_inv * &self.back;
        self.estimate += &self.back * s.b_u.column(0) * y;
        (y, u)
    }
}

/// Runs the coding loop for `noise.len()` channel uses from encoder state
/// `x_u0`.
pub fn run_loop_with_noise(scheme: &CodingScheme, x_u0: &DVector<f64>, noise: &[f64]) -> Result<LoopTrace> {
    let mut tx = Transmission::new(scheme, x_u0)?;
    let mut trace = LoopTrace {
        y: Vec::with_capacity(noise.len()),
        u: Vec::with_capacity(noise.len()),
        initial_state_estimates: vec![tx.estimate.clone()],
    };
    for &w in noise {
        let (y, u) = tx.step(w);
        trace.y.push(y);
        trace.u.push(u);
        trace.initial_state_estimates.push(tx.estimate.clone());
    }
    Ok(trace)
}

/// Runs the coding loop for `n` channel uses; `model = None` is the
/// noiseless channel.
pub fn run_loop(scheme: &CodingScheme, model: Option<&NoiseModel>, x_u0: &DVector<f64>, n: usize, seed: u64) -> Result<LoopTrace> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be at least one step".into()));
    }
    let noise = match model {
        Some(m) => sample_noise(m, n, seed),
        None => vec![0.0; n],
    };
    run_loop_with_noise(scheme, x_u0, &noise)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmissionStats {
    pub trials: usize,
    pub horizon: usize,
    pub message_bits: u32,
    pub empirical_input_power: f64,
    pub decode_error_rate: f64,
    /// Mean of `|x̂_{u,0}(n) + x_{u,0}|` over trials.
    pub mean_estimate_error: f64,
}

impl TransmissionStats {
    pub fn csv(&self) -> String {
        format!(
            "trials,horizon,message_bits,empirical_input_power,decode_error_rate,mean_estimate_error\n{},{},{},{:.17e},{:.17e},{:.17e}\n",
            self.trials, self.horizon, self.message_bits, self.empirical_input_power, self.decode_error_rate, self.mean_estimate_error
        )
    }
}

struct TrialOutcome {
    error: bool,
    power: f64,
    estimate_error: f64,
}

/// Monte-Carlo transmission of uniformly drawn messages of `n_bits` bits over
/// `n` channel uses. Trial `t` draws from the seed `seed + t`, so results do
/// not depend on the thread count.
pub fn simulate_transmission(
    scheme: &CodingScheme,
    model: Option<&NoiseModel>,
    n: usize,
    n_bits: u32,
    trials: usize,
    seed: u64,
) -> Result<TransmissionStats> {
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("horizon and trial count must be positive".into()));
    }
    if n_bits as f64 >= n as f64 * scheme.rate_bits {
        return Err(Error::InvalidArgument(format!(
            "{n_bits} bits over {n} uses is not below the scheme rate {:.6} bits/use",
            scheme.rate_bits
        )));
    }
    bit_allocation(scheme, n_bits)?;
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialOutcome> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let message = rng.random_range(1..=(1u64 << n_bits));
            let noise_seed: u64 = rng.random();
            let x_u0 = encode_message(scheme, message, n_bits)?;
            let trace = run_loop(scheme, model, &x_u0, n, noise_seed)?;
            let estimate = -trace.final_estimate();
            let decoded = decode_message(scheme, &estimate, n_bits)?;
            let squares: Vec<f64> = trace.u.iter().map(|u| u * u).collect();
            Ok(TrialOutcome {
                error: decoded != message,
                power: pairwise_sum(&squares) / n as f64,
                estimate_error: (estimate - x_u0).norm(),
            })
        })
        .collect::<Result<_>>()?;
    let errors = outcomes.iter().filter(|o| o.error).count();
    let powers: Vec<f64> = outcomes.iter().map(|o| o.power).collect();
    let estimate_errors: Vec<f64> = outcomes.iter().map(|o| o.estimate_error).collect();
    Ok(TransmissionStats {
        trials,
        horizon: n,
        message_bits: n_bits,
        empirical_input_power: pairwise_sum(&powers) / trials as f64,
        decode_error_rate: errors as f64 / trials as f64,
        mean_estimate_error: pairwise_sum(&estimate_errors) / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn frequencies(count: usize) -> impl Iterator<Item = f64> {
        (0..count).map(move |k| -PI + 2.0 * PI * (k as f64 + 0.25) / count as f64)
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn test_filter() -> FirFilter {
        FirFilter::new(vec![0.9, -1.4, 0.3, 0.25, -0.1, 0.05])
    }

    #[test]
    fn zero_parameter_gives_zero_controller() {
        let k = youla_controller(&FirFilter::new(vec![0.0; 4]));
        for th in frequencies(8) {
            assert_eq!(k.freq_response(th), Complex64::new(0.0, 0.0));
        }
        let scheme = stable_unstable_split(&k);
        // nilpotent A: every eigenvalue is zero, so the scheme has no unstable part
        let scheme = scheme.unwrap();
        assert_eq!(scheme.message_dim, 0);
        assert_eq!(scheme.rate_bits, 0.0);
    }

    #[test]
    fn single_delay_controller() {
        // Q = 2 z⁻¹ → K = -2 z⁻¹ / (1 + 2 z⁻¹) = -2 / (z + 2)
        let k = youla_controller(&FirFilter::new(vec![2.0]));
        for th in frequencies(32) {
            let z = Complex64::from_polar(1.0, th);
            let expected = -2.0 / (z + 2.0);
            assert!(rel(k.freq_response(th), expected) < 1e-12);
        }
        let scheme = stable_unstable_split(&k).unwrap();
        assert_eq!(scheme.message_dim, 1);
        assert!((scheme.a_u[(0, 0)] + 2.0).abs() < 1e-14);
        assert!((scheme.rate_bits - 1.0).abs() < 1e-14);
    }

    #[test]
    fn controller_matches_rational_evaluation() {
        let fir = test_filter();
        let k = youla_controller(&fir);
        assert_eq!(k.order(), fir.len());
        for th in frequencies(32) {
            let q = fir.freq_response(th);
            assert!(rel(k.freq_response(th), -q / (1.0 + q)) < 1e-8);
        }
    }

    #[test]
    fn loop_identities() {
        let fir = test_filter();
        let k = youla_controller(&fir);
        let s = sensitivity(&k).unwrap();
        let t = complementary_sensitivity(&k).unwrap();
        for th in frequencies(32) {
            let q = fir.freq_response(th);
            let kk = k.freq_response(th);
            assert!(rel(s.freq_response(th), 1.0 + q) < 1e-8);
            assert!(rel(t.freq_response(th), -q) < 1e-8);
            assert!(rel(1.0 / (1.0 + kk), 1.0 + q) < 1e-8);
        }
        // the loop inherits the (nilpotent) poles of Q
        assert!(closed_loop_radius(&k).unwrap() < 1.0 - 1e-6);
    }

    #[test]
    fn split_preserves_transfer_function() {
        let k = youla_controller(&test_filter());
        let eigs = linalg::eigenvalues(&k.a).unwrap();
        let scheme = stable_unstable_split(&k).unwrap();
        assert!(scheme.message_dim > 0 && scheme.message_dim < k.order());
        assert!(linalg::spectral_radius(&scheme.a_s).unwrap() < 1.0);
        assert!(scheme.unstable_eigenvalues().iter().all(|z| z.norm() > 1.0));
        let expected: f64 = eigs.iter().filter(|z| z.norm() > 1.0).map(|z| z.norm().log2()).sum();
        assert!((scheme.rate_bits - expected).abs() < 1e-10);
        let rebuilt = scheme.controller();
        for th in frequencies(32) {
            assert!(rel(rebuilt.freq_response(th), k.freq_response(th)) < 1e-8);
        }
    }

    #[test]
    fn rate_equals_achievable_rate() {
        let fir = test_filter();
        let scheme = stable_unstable_split(&youla_controller(&fir)).unwrap();
        let rate = crate::synthesis::achievable_rate(&fir).unwrap();
        assert!((scheme.rate_bits - rate.bits).abs() < 1e-6);
    }

    #[test]
    fn marginal_mode_is_rejected() {
        let k = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[1.0 + 1e-8, 0.0, 0.0, 0.5]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(stable_unstable_split(&k), Err(Error::MarginalMode(_))));
    }

    #[test]
    fn stable_controller_has_no_message() {
        let k = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, -0.3]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let scheme = stable_unstable_split(&k).unwrap();
        assert_eq!(scheme.message_dim, 0);
        assert_eq!(scheme.rate_bits, 0.0);
        assert!(encode_message(&scheme, 1, 1).is_err());
    }

    fn one_pole_scheme() -> CodingScheme {
        stable_unstable_split(&youla_controller(&FirFilter::new(vec![2.0]))).unwrap()
    }

    #[test]
    fn message_centroids() {
        let s = one_pole_scheme();
        assert_eq!(encode_message(&s, 1, 1).unwrap()[0], -0.25);
        assert_eq!(encode_message(&s, 2, 1).unwrap()[0], 0.25);
        let c: Vec<f64> = (1..=4).map(|m| encode_message(&s, m, 2).unwrap()[0]).collect();
        assert_eq!(c, vec![-0.375, -0.125, 0.125, 0.375]);
        assert!(encode_message(&s, 0, 2).is_err());
        assert!(encode_message(&s, 5, 2).is_err());
        assert!(encode_message(&s, 1, 53).is_err());
    }

    #[test]
    fn encode_decode_is_a_bijection() {
        let k = youla_controller(&test_filter());
        let scheme = stable_unstable_split(&k).unwrap();
        for n_bits in [1u32, 5, 12] {
            let alloc = bit_allocation(&scheme, n_bits).unwrap();
            assert_eq!(alloc.iter().sum::<u32>(), n_bits);
            for m in 1..=(1u64 << n_bits) {
                let x = encode_message(&scheme, m, n_bits).unwrap();
                assert!(x.iter().all(|v| v.abs() < 0.5));
                assert_eq!(decode_message(&scheme, &x, n_bits).unwrap(), m);
            }
        }
    }

    #[test]
    fn allocation_follows_mode_growth() {
        let mut scheme = one_pole_scheme();
        scheme.unstable_eigs = vec![[4.0, 0.0], [2.0, 0.0]];
        scheme.message_dim = 2;
        assert_eq!(bit_allocation(&scheme, 3).unwrap(), vec![2, 1]);
        assert_eq!(bit_allocation(&scheme, 4).unwrap(), vec![3, 1]);
        assert_eq!(bit_allocation(&scheme, 5).unwrap(), vec![3, 2]);
    }

    #[test]
    fn noiseless_estimate_converges() {
        let fir = test_filter();
        let scheme = stable_unstable_split(&youla_controller(&fir)).unwrap();
        let x0 = encode_message(&scheme, 3, 6).unwrap();
        let trace = run_loop(&scheme, None, &x0, 50, 0).unwrap();
        assert!((trace.final_estimate() + &x0).norm() <= 1e-8);
        assert_eq!(trace.initial_state_estimates.len(), 51);
    }

    #[test]
    fn one_pole_loop_by_hand() {
        // K = -2/(z+2): A_u = -2, and u = -(C_u x_u); the loop state obeys x⁺ = -2x + B(u + w)
        let scheme = one_pole_scheme();
        let (b, c) = (scheme.b_u[(0, 0)], scheme.c_u[(0, 0)]);
        let x0 = DVector::from_element(1, 0.25);
        let w = [0.3, -0.1, 0.2, 0.0];
        let trace = run_loop_with_noise(&scheme, &x0, &w).unwrap();
        let (mut x, mut est, mut back) = (0.25, 0.0, 1.0);
        for (k, wk) in w.iter().enumerate() {
            let u = -c * x;
            let y = u + wk;
            assert!((trace.u[k] - u).abs() < 1e-15 && (trace.y[k] - y).abs() < 1e-15);
            x = -2.0 * x + b * y;
            back /= -2.0;
            est += back * b * y;
            assert!((trace.initial_state_estimates[k + 1][0] - est).abs() < 1e-15);
        }
    }

    #[test]
    fn transmission_is_reproducible_and_noiseless_exact() {
        let fir = test_filter();
        let scheme = stable_unstable_split(&youla_controller(&fir)).unwrap();
        let model = NoiseModel::moving_average(vec![1.0, 0.1]).unwrap();
        let a = simulate_transmission(&scheme, Some(&model), 20, 8, 64, 7).unwrap();
        let b = simulate_transmission(&scheme, Some(&model), 20, 8, 64, 7).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.decode_error_rate));
        let clean = simulate_transmission(&scheme, None, 20, 8, 64, 7).unwrap();
        assert_eq!(clean.decode_error_rate, 0.0);
        assert!(simulate_transmission(&scheme, None, 2, 64, 1, 0).is_err());
    }

    #[test]
    fn scheme_json_round_trip() {
        let scheme = stable_unstable_split(&youla_controller(&test_filter())).unwrap();
        let text = serde_json::to_string(&scheme).unwrap();
        let back: CodingScheme = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scheme);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["unstable_eigs"][0].as_array().unwrap().len(), 2);
    }
}
