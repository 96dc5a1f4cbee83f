//! Hankel-norm model reduction of a long impulse response (Kung's method).
//!
//! The input is the strictly causal part `g_1, g_2, ...` of an impulse
//! response; the reduced models have no feedthrough term.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::StateSpace;

/// Default order rule: smallest `r` with `σ_{r+1} / σ_1` below this.
pub const DEFAULT_ORDER_RTOL: f64 = 1e-6;
/// Singular values below `σ_1` times this count as zero.
pub const RANK_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HankelSpectrum {
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    pub chosen_order: usize,
    /// `2 Σ_{k > chosen_order} σ_k`.
    pub truncation_error_bound: f64,
}

impl HankelSpectrum {
    pub fn rank(&self) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|s| **s > top * RANK_RTOL && **s > 0.0).count()
    }

    /// Same spectrum with a different order.
    pub fn with_order(&self, order: usize) -> HankelSpectrum {
        let order = order.min(self.singular_values.len());
        HankelSpectrum {
            singular_values: self.singular_values.clone(),
            chosen_order: order,
            truncation_error_bound: 2.0 * self.singular_values[order..].iter().sum::<f64>(),
        }
    }
}

/// `H[i][j] = g_{i+j+1+shift}`, zero past the end of the data.
fn hankel(impulse: &[f64], shift: usize) -> DMatrix<f64> {
    let n = impulse.len();
    DMatrix::from_fn(n, n, |i, j| impulse.get(i + j + shift).copied().unwrap_or(0.0))
}

struct SortedSvd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    v_t: DMatrix<f64>,
}

fn sorted_svd(h: DMatrix<f64>) -> Result<SortedSvd> {
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numerical("Hankel SVD failed".into())),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]);
    let s = order.iter().map(|&k| svd.singular_values[k]).collect();
    Ok(SortedSvd { u, s, v_t })
}

/// Singular values of the (zero-padded, square) Hankel matrix of `impulse`,
/// with the default order choice.
pub fn hankel_singular_values(impulse: &[f64]) -> Result<HankelSpectrum> {
    if impulse.is_empty() {
        return Err(Error::InvalidArgument("empty impulse response".into()));
    }
    let s = sorted_svd(hankel(impulse, 0))?.s;
    let top = s[0];
    let chosen = if top == 0.0 {
        0
    } else {
        (0..s.len()).find(|&r| s[r] / top < DEFAULT_ORDER_RTOL).unwrap_or(s.len())
    };
    let spectrum = HankelSpectrum { singular_values: s, chosen_order: 0, truncation_error_bound: 0.0 };
    Ok(spectrum.with_order(chosen))
}

/// Order-`order` realization from the leading singular triplets of the
/// Hankel matrix. The frequency-response error against the FIR built from
/// `impulse` is at most `2 Σ` of the discarded singular values.
pub fn kung_reduce(impulse: &[f64], order: usize) -> Result<StateSpace> {
    if impulse.is_empty() {
        return Err(Error::InvalidArgument("empty impulse response".into()));
    }
    if order == 0 {
        return Err(Error::InvalidArgument("reduction order must be at least 1".into()));
    }
    let svd = sorted_svd(hankel(impulse, 0))?;
    let top = svd.s[0];
    let rank = svd.s.iter().filter(|s| **s > top * RANK_RTOL && **s > 0.0).count();
    if order > rank {
        return Err(Error::OrderExceedsRank { order, rank });
    }
    let n = impulse.len();
    let inv_sqrt: Vec<f64> = svd.s[..order].iter().map(|s| 1.0 / s.sqrt()).collect();
    let sqrt: Vec<f64> = svd.s[..order].iter().map(|s| s.sqrt()).collect();

    // observability factor U Σ^½ and controllability factor Σ^½ V'
    let obs = DMatrix::from_fn(n, order, |i, k| svd.u[(i, k)] * sqrt[k]);
    let ctr = DMatrix::from_fn(order, n, |k, j| svd.v_t[(k, j)] * sqrt[k]);
    let left = DMatrix::from_fn(order, n, |k, i| svd.u[(i, k)] * inv_sqrt[k]);
    let right = DMatrix::from_fn(n, order, |j, k| svd.v_t[(k, j)] * inv_sqrt[k]);
    let a = left * hankel(impulse, 1) * right;
    let b = ctr.columns(0, 1).clone_owned();
    let c = obs.rows(0, 1).clone_owned();
    StateSpace::new(a, b, c, DMatrix::zeros(1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn fir_response(g: &[f64], theta: f64) -> Complex64 {
        g.iter().enumerate().map(|(k, c)| Complex64::from_polar(*c, -theta * (k + 1) as f64)).sum()
    }

    fn sup_error(g: &[f64], ss: &StateSpace, points: usize) -> f64 {
        (0..points)
            .map(|k| {
                let th = -PI + 2.0 * PI * (k as f64 + 0.5) / points as f64;
                (fir_response(g, th) - ss.freq_response(th)).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Largest singular value by power iteration on `H'H`.
    fn power_iteration_sigma(h: &DMatrix<f64>) -> f64 {
        let gram = h.transpose() * h;
        let mut v = nalgebra::DVector::from_element(h.ncols(), 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = &gram * &v;
            lambda = w.norm();
            v = w / lambda;
        }
        lambda.sqrt()
    }

    #[test]
    fn single_tap() {
        let hs = hankel_singular_values(&[1.0]).unwrap();
        assert_eq!(hs.singular_values, vec![1.0]);
        assert_eq!(hs.chosen_order, 1);
        assert_eq!(hs.truncation_error_bound, 0.0);
        let ss = kung_reduce(&[1.0], 1).unwrap();
        assert!(ss.a[(0, 0)].abs() < 1e-15);
        assert!((ss.b[(0, 0)] * ss.c[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn order_two_fir_has_rank_two() {
        let g = [0.7, -0.4, 0.0, 0.0, 0.0, 0.0];
        let hs = hankel_singular_values(&g).unwrap();
        assert_eq!(hs.rank(), 2);
        assert_eq!(hs.chosen_order, 2);
        assert!(hs.singular_values[2..].iter().all(|s| *s < 1e-14));
        match kung_reduce(&g, 3) {
            Err(Error::OrderExceedsRank { order: 3, rank: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lossless_exact_rank_reduction() {
        let g = [0.7, -0.4, 0.0, 0.0, 0.0, 0.0];
        let ss = kung_reduce(&g, 2).unwrap();
        assert!(sup_error(&g, &ss, 64) < 1e-8);
        let imp = ss.impulse_response(8);
        for k in 0..7 {
            assert!((imp[k + 1] - g.get(k).copied().unwrap_or(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_impulse() {
        let g: Vec<f64> = (1..=40).map(|k| 0.5f64.powi(k)).collect();
        let hs = hankel_singular_values(&g).unwrap();
        let oracle = power_iteration_sigma(&hankel(&g, 0));
        assert!((hs.singular_values[0] - oracle).abs() < 1e-10);
        // untruncated Hankel is rank one with σ = Σ 4^{-k} / 2 = 2/3
        assert!((hs.singular_values[0] - 2.0 / 3.0).abs() < 1e-10);
        assert_eq!(hs.chosen_order, 1);
    }

    #[test]
    fn error_within_hankel_bound() {
        // decaying oscillatory response cut off at 24 lags: full rank
        let g: Vec<f64> = (1..=24)
            .map(|k| {
                let k = k as f64;
                0.8f64.powf(k) * (0.9 * k).cos() + 0.3 * 0.5f64.powf(k)
            })
            .collect();
        let hs = hankel_singular_values(&g).unwrap();
        for order in 1..=12 {
            let ss = kung_reduce(&g, order).unwrap();
            assert!(ss.is_stable());
            let err = sup_error(&g, &ss, 64);
            let bound = hs.with_order(order).truncation_error_bound;
            assert!(err <= bound * (1.0 + 1e-9) + 1e-12, "order {order}: {err} > {bound}");
        }
    }

    #[test]
    fn error_decreases_with_order_on_fast_decay() {
        let g: Vec<f64> = (1..=40i32)
            .map(|k| 0.6f64.powi(k) - 0.5 * (-0.3f64).powi(k) + 0.7f64.powi(k) * (1.3 * k as f64).sin())
            .collect();
        let mut previous = f64::INFINITY;
        for order in 1..=6 {
            let err = sup_error(&g, &kung_reduce(&g, order).unwrap(), 64);
            assert!(err <= previous + 1e-10, "order {order}: {err} > {previous}");
            previous = err;
        }
        // what remains is the 0.7^40 cut-off of the order-4 response
        assert!(previous < 1e-5, "{previous}");
    }

    #[test]
    fn singular_values_are_sorted() {
        let g = [0.1, 1.0, -0.3, 0.05, 0.4];
        let s = hankel_singular_values(&g).unwrap().singular_values;
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }
}
