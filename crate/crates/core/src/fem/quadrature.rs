//! Quadrature rules on the reference edge [0,1] and the reference triangle.
//!
//! Edge rules are Gauss-Legendre, computed by Newton iteration on the
//! Legendre recurrence. Triangle rules are collapsed (Duffy) tensor products
//! of Gauss-Legendre rules: the map (a, b) -> (a (1-b), b) sends the unit
//! square to the reference triangle with Jacobian (1-b), so a polynomial of
//! total degree d pulls back to degree d in `a` and d+1 in `b` (including the
//! Jacobian). Slightly more points than optimal symmetric rules, but exact at
//! every degree and table-free.

use crate::{Error, Result};

/// Largest supported exactness degree. Far above what the solver requests;
/// exists so a runaway degree request fails loudly instead of building a
/// gigantic rule.
pub const MAX_DEGREE: usize = 60;

/// Quadrature rule on the reference edge [0,1].
#[derive(Debug, Clone)]
pub struct EdgeQuadRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Quadrature rule on the reference triangle {x,y >= 0, x+y <= 1}.
#[derive(Debug, Clone)]
pub struct TriQuadRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Gauss-Legendre nodes and weights on [-1,1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess, then Newton on P_n.
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Legendre polynomial P_n and its derivative at x.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
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
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss rule on [0,1] exact for polynomials of degree `d`.
pub fn edge_quadrature(d: usize) -> Result<EdgeQuadRule> {
    if d > MAX_DEGREE {
        return Err(Error::Quadrature(d, MAX_DEGREE));
    }
    let n = d / 2 + 1; // 2n-1 >= d
    let (xs, ws) = gauss_legendre(n);
    Ok(EdgeQuadRule {
        points: xs.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        weights: ws.iter().map(|w| 0.5 * w).collect(),
        degree: d,
    })
}

/// Collapsed tensor rule on the reference triangle, exact for bivariate
/// polynomials of total degree `d`.
pub fn triangle_quadrature(d: usize) -> Result<TriQuadRule> {
    if d > MAX_DEGREE {
        return Err(Error::Quadrature(d, MAX_DEGREE));
    }
    let na = d / 2 + 1; // degree d in a
    let nb = (d + 1) / 2 + 1; // degree d+1 in b (Duffy Jacobian)
    let (xa, wa) = gauss_legendre(na);
    let (xb, wb) = gauss_legendre(nb);
    let mut points = Vec::with_capacity(na * nb);
    let mut weights = Vec::with_capacity(na * nb);
    for (b, wb) in xb.iter().zip(&wb) {
        let b01 = 0.5 * (b + 1.0);
        for (a, wa) in xa.iter().zip(&wa) {
            let a01 = 0.5 * (a + 1.0);
            points.push([a01 * (1.0 - b01), b01]);
            weights.push(0.25 * wa * wb * (1.0 - b01));
        }
    }
    Ok(TriQuadRule { points, weights, degree: d })
}

impl TriQuadRule {
    pub fn integrate(&self, f: impl Fn([f64; 2]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(*p))
            .sum()
    }
}

impl EdgeQuadRule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * f(*t))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_measure() {
        let q = triangle_quadrature(0).unwrap();
        assert!((q.integrate(|_| 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn triangle_monomials() {
        // Analytic values: int x^2 = 1/12, int x*y = 1/24 over the reference
        // triangle.
        let q = triangle_quadrature(2).unwrap();
        assert!((q.integrate(|p| p[0] * p[0]) - 1.0 / 12.0).abs() < 1e-15);
        assert!((q.integrate(|p| p[0] * p[1]) - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn edge_measure_and_cubic() {
        let q = edge_quadrature(0).unwrap();
        assert!((q.integrate(|_| 1.0) - 1.0).abs() < 1e-15);
        let q = edge_quadrature(3).unwrap();
        assert!((q.integrate(|t| t * t * t) - 0.25).abs() < 1e-15);
    }

    /// int_0^1 t^m dt = 1/(m+1).
    #[test]
    fn edge_exactness_sweep() {
        for d in 0..=20 {
            let q = edge_quadrature(d).unwrap();
            for m in 0..=d {
                let exact = 1.0 / (m as f64 + 1.0);
                let got = q.integrate(|t| t.powi(m as i32));
                assert!(
                    (got - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                    "edge degree {d}, monomial {m}: {got} vs {exact}"
                );
            }
        }
    }

    /// int_T x^a y^b = a! b! / (a+b+2)!.
    #[test]
    fn triangle_exactness_sweep() {
        let factorial = |m: usize| (1..=m).map(|v| v as f64).product::<f64>().max(1.0);
        for d in 0..=16 {
            let q = triangle_quadrature(d).unwrap();
            assert!(q.weights.iter().all(|&w| w > 0.0));
            let total: f64 = q.weights.iter().sum();
            assert!((total - 0.5).abs() < 1e-14);
            for a in 0..=d {
                for b in 0..=(d - a) {
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    let got = q.integrate(|p| p[0].powi(a as i32) * p[1].powi(b as i32));
                    assert!(
                        (got - exact).abs() <= 1e-13 * exact.max(1.0),
                        "tri degree {d}, monomial ({a},{b}): {got} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn degree_cap_reported() {
        let err = triangle_quadrature(MAX_DEGREE + 1).unwrap_err();
        assert!(err.to_string().contains(&MAX_DEGREE.to_string()));
        assert!(edge_quadrature(MAX_DEGREE + 1).is_err());
    }
}
