//! Dense linear-algebra helpers shared by the realization, synthesis and
//! control code: eigenvalues with balancing, polynomial roots, discrete
//! Lyapunov and Sylvester solvers, and a few summation utilities.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 10_000;

/// Pairwise (tree) summation. The result depends only on the order of
/// `values`, so callers get reproducible sums.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Parlett-Reinsch balancing by powers of two. Returns the balanced matrix,
/// which is similar to the input and has the same eigenvalues.
pub fn balance(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let radix = 2.0_f64;
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= radix * radix;
            }
            g = r * radix;
            while c > g {
                f /= radix;
                c /= radix * radix;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
    a
}

/// Eigenvalues of a general real square matrix (balanced real Schur).
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let balanced = balance(a.clone());
    if let Some(schur) = Schur::try_new(balanced.clone(), SCHUR_EPS, SCHUR_MAX_ITER) {
        return Ok(schur.complex_eigenvalues().iter().copied().collect());
    }
    // Exactly structured inputs (shift matrices, zero blocks) can stall the
    // shifted QR iteration; an orthogonal similarity breaks the structure.
    let q = scrambler(a.nrows());
    let rotated = q.transpose() * balanced * &q;
    let schur = Schur::try_new(rotated, SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Fixed dense orthogonal matrix (Q factor of a deterministic pseudo-random matrix).
fn scrambler(n: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5).qr().q()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Roots of the monic polynomial `z^n + coeffs[0] z^(n-1) + ... + coeffs[n-1]`
/// as eigenvalues of its companion matrix.
pub fn monic_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let n = coeffs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut companion = DMatrix::zeros(n, n);
    for (j, c) in coeffs.iter().enumerate() {
        companion[(0, j)] = -c;
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    eigenvalues(&companion)
}

/// Solves the discrete Lyapunov equation `X = A X A' + Q` by Smith doubling.
/// Requires the spectral radius of `A` to be below one.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut ak = a.clone();
    let mut x = q.clone();
    for _ in 0..200 {
        let step = &ak * &x * ak.transpose();
        let step_norm = step.norm();
        x += step;
        if !step_norm.is_finite() {
            break;
        }
        if step_norm <= 1e-17 * x.norm().max(f64::MIN_POSITIVE) {
            return Ok(symmetrize(x));
        }
        ak = &ak * &ak;
        if !ak.norm().is_finite() {
            break;
        }
    }
    Err(Error::Numerical(
        "Smith iteration for the Lyapunov equation diverged".into(),
    ))
}

fn symmetrize(x: DMatrix<f64>) -> DMatrix<f64> {
    (&x + x.transpose()) * 0.5
}

/// Solves the Sylvester equation `A X + X B = C` through its Kronecker form.
/// Intended for the small blocks produced by the stable/unstable split.
pub fn sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = (a.nrows(), b.nrows());
    if p == 0 || q == 0 {
        return Ok(DMatrix::zeros(p, q));
    }
    let dim = p * q;
    // vec(AX + XB) = (I_q (x) A + B' (x) I_p) vec(X), column-major vec
    let mut kron = DMatrix::zeros(dim, dim);
    for col in 0..q {
        for i in 0..p {
            for k in 0..p {
                kron[(col * p + i, col * p + k)] += a[(i, k)];
            }
        }
    }
    for col in 0..q {
        for l in 0..q {
            let coef = b[(l, col)];
            if coef != 0.0 {
                for i in 0..p {
                    kron[(col * p + i, l * p + i)] += coef;
                }
            }
        }
    }
    let rhs = DVector::from_iterator(dim, c.iter().copied());
    let sol = kron
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Sylvester operator".into()))?;
    Ok(DMatrix::from_iterator(p, q, sol.iter().copied()))
}

/// Symmetric positive semidefinite square root factor `L` with `L L' = X`.
pub fn psd_factor(x: &DMatrix<f64>) -> DMatrix<f64> {
    if x.nrows() == 0 {
        return x.clone();
    }
    let eig = x.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 4950.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn roots_of_quadratic() {
        // z^2 - 3z + 2 = (z-1)(z-2)
        let mut r: Vec<f64> = monic_roots(&[-3.0, 2.0]).unwrap().iter().map(|z| z.re).collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = dlyap(&a, &q).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_unstable_fails() {
        let a = DMatrix::from_element(1, 1, 1.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        assert!(dlyap(&a, &q).is_err());
    }

    #[test]
    fn sylvester_residual() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.5]);
        let b = DMatrix::from_row_slice(1, 1, &[-2.0]);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let x = sylvester(&a, &b, &c).unwrap();
        let res = &a * &x + &x * &b - &c;
        assert!(res.norm() < 1e-13);
    }

    #[test]
    fn balancing_preserves_spectrum() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1e6, 0.0, 1e-6, 2.0, 1e4, 0.0, 1e-4, 3.0]);
        let mut before: Vec<f64> = eigenvalues(&a).unwrap().iter().map(|z| z.re).collect();
        let mut after: Vec<f64> = Schur::new(balance(a)).complex_eigenvalues().iter().map(|z| z.re).collect();
        before.sort_by(|a, b| a.partial_cmp(b).unwrap());
        after.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nilpotent_shift_matrix() {
        let mut a = DMatrix::zeros(12, 12);
        for i in 1..12 {
            a[(i, i - 1)] = 1.0;
        }
        let eig = eigenvalues(&a).unwrap();
        assert_eq!(eig.len(), 12);
        // a defective zero eigenvalue is only determined to about eps^(1/n)
        assert!(eig.iter().all(|z| z.norm() < 0.1));
    }
}
