//! Gauss–Legendre rules and shifted Legendre polynomials on `[0, 1]`.

use alloc::vec::Vec;

use crate::math;

/// One-dimensional Gauss–Legendre rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// `n`-point rule, exact for polynomials of degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a Gauss rule needs at least one point");
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let nf = n as f64;
        for i in 0..n {
            // Chebyshev-like initial guess, refined by Newton on P_n.
            let mut x = math::cos(core::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5));
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_pn(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_pn(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            points.push(0.5 * (1.0 - x));
            weights.push(0.5 * w);
        }
        // ascending order
        points.reverse();
        weights.reverse();
        GaussRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Legendre polynomial `P_n` on `[-1, 1]` and its derivative.
fn legendre_pn(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Values and derivatives of the shifted Legendre polynomials
/// `L_0..=L_degree` at `t ∈ [0, 1]`, where `L_m(t) = P_m(2t - 1)`.
pub fn shifted_legendre(degree: usize, t: f64, values: &mut [f64], derivs: &mut [f64]) {
    let x = 2.0 * t - 1.0;
    values[0] = 1.0;
    derivs[0] = 0.0;
    if degree == 0 {
        return;
    }
    values[1] = x;
    derivs[1] = 2.0;
    for m in 2..=degree {
        let mf = m as f64;
        values[m] = ((2.0 * mf - 1.0) * x * values[m - 1] - (mf - 1.0) * values[m - 2]) / mf;
        // P'_m = P'_{m-2} + (2m - 1) P_{m-1}, chain rule factor 2
        derivs[m] = derivs[m - 2] + 2.0 * (2.0 * mf - 1.0) * values[m - 1];
    }
}

/// Convenience: `L_m(t)` only.
pub fn shifted_legendre_value(m: usize, t: f64) -> f64 {
    let mut v = [0.0; 8];
    let mut d = [0.0; 8];
    shifted_legendre(m, t, &mut v, &mut d);
    v[m]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_rule_integrates_monomials_exactly() {
        for n in 1..=7 {
            let rule = GaussRule::new(n);
            for p in 0..(2 * n) {
                let s: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * math::powi(*x, p as i32))
                    .sum();
                assert!((s - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "n={n} p={p} s={s}");
            }
        }
    }

    #[test]
    fn shifted_legendre_is_orthogonal() {
        let rule = GaussRule::new(6);
        for a in 0..5 {
            for b in 0..5 {
                let s: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(t, w)| w * shifted_legendre_value(a, *t) * shifted_legendre_value(b, *t))
                    .sum();
                let expected = if a == b { 1.0 / (2.0 * a as f64 + 1.0) } else { 0.0 };
                assert!((s - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shifted_legendre_derivative_matches_finite_difference() {
        let mut v = [0.0; 5];
        let mut d = [0.0; 5];
        let mut vp = [0.0; 5];
        let mut vm = [0.0; 5];
        let t = 0.37;
        let h = 1e-6;
        shifted_legendre(4, t, &mut v, &mut d);
        shifted_legendre(4, t + h, &mut vp, &mut [0.0; 5]);
        shifted_legendre(4, t - h, &mut vm, &mut [0.0; 5]);
        for m in 0..=4 {
            let fd = (vp[m] - vm[m]) / (2.0 * h);
            assert!((fd - d[m]).abs() < 1e-7, "m={m}");
        }
    }
}
