//! Adaptive Simpson quadrature with a Richardson error estimate.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;
const MAX_EVALUATIONS: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Sum of the per-interval Richardson estimates `|S₂ - S₁| / 15`.
    pub error_estimate: f64,
    pub evaluations: usize,
}

struct Segment {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`, starting from
/// `panels` equal sub-intervals. Oscillatory integrands need enough initial
/// panels to resolve their oscillations.
///
/// Fails with [`Error::Quadrature`] carrying the best estimate when some
/// interval hits the subdivision cap before meeting its share of `tol`.
pub fn adaptive_simpson<F>(mut f: F, a: f64, b: f64, tol: f64, panels: usize) -> Result<Quadrature>
where
    F: FnMut(f64) -> f64,
{
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let evaluations = std::cell::Cell::new(0usize);
    let mut eval = |x: f64| {
        evaluations.set(evaluations.get() + 1);
        f(x)
    };

    let mut stack = Vec::with_capacity(64);
    let mut left_value = eval(a);
    let mut x0 = a;
    for p in 0..panels {
        let x1 = if p + 1 == panels { b } else { a + width * (p + 1) as f64 };
        let fm = eval(0.5 * (x0 + x1));
        let f1 = eval(x1);
        stack.push(Segment {
            a: x0,
            b: x1,
            fa: left_value,
            fm,
            fb: f1,
            whole: simpson(x0, x1, left_value, fm, f1),
            tol: tol / panels as f64,
            depth: 0,
        });
        left_value = f1;
        x0 = x1;
    }
    // pop left to right
    stack.reverse();

    let mut value = 0.0;
    let mut error = 0.0;
    let mut failed = false;
    while let Some(seg) = stack.pop() {
        let m = 0.5 * (seg.a + seg.b);
        let lm = 0.5 * (seg.a + m);
        let rm = 0.5 * (m + seg.b);
        let flm = eval(lm);
        let frm = eval(rm);
        let left = simpson(seg.a, m, seg.fa, flm, seg.fm);
        let right = simpson(m, seg.b, seg.fm, frm, seg.fb);
        let delta = left + right - seg.whole;
        let converged = delta.abs() <= 15.0 * seg.tol;
        let exhausted = seg.depth >= MAX_DEPTH || evaluations.get() >= MAX_EVALUATIONS;
        if converged || exhausted || !delta.is_finite() {
            if !converged {
                failed = true;
            }
            value += left + right + delta / 15.0;
            error += delta.abs() / 15.0;
            continue;
        }
        let tol = 0.5 * seg.tol;
        stack.push(Segment { a: m, b: seg.b, fa: seg.fm, fm: frm, fb: seg.fb, whole: right, tol, depth: seg.depth + 1 });
        stack.push(Segment { a: seg.a, b: m, fa: seg.fa, fm: flm, fb: seg.fm, whole: left, tol, depth: seg.depth + 1 });
    }

    if failed || !value.is_finite() {
        return Err(Error::Quadrature { estimate: value, error_bound: error });
    }
    Ok(Quadrature { value, error_estimate: error, evaluations: evaluations.get() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomial_is_exact() {
        let q = adaptive_simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12, 1).unwrap();
        assert!((q.value - 0.0).abs() < 1e-14);
    }

    #[test]
    fn smooth_periodic_integrand() {
        // ∫_0^π ln(a + cos θ) dθ = π ln((a + √(a² - 1)) / 2)
        let q = adaptive_simpson(|t: f64| (1.3 + t.cos()).ln(), 0.0, PI, 1e-12, 8).unwrap();
        let exact = PI * ((1.3 + (1.3f64 * 1.3 - 1.0).sqrt()) / 2.0).ln();
        assert!((q.value - exact).abs() < 1e-11, "{} vs {}", q.value, exact);
        assert!(q.error_estimate < 1e-11);
    }

    #[test]
    fn singular_integrand_reports_failure() {
        let r = adaptive_simpson(|x: f64| 1.0 / x.abs().sqrt().max(1e-300), -1.0, 1.0, 1e-14, 1);
        match r {
            Err(Error::Quadrature { error_bound, .. }) => assert!(error_bound >= 0.0),
            Ok(q) => panic!("expected failure, got {q:?}"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
