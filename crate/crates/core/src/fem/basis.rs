//! Orthonormal modal bases on the reference triangle and the reference edge.
//!
//! The triangle basis is the Koornwinder family, evaluated in
//! singularity-free form: the Legendre factor in the collapsed coordinate is
//! carried as the scaled polynomial
//!
//!   phi_p(x,y) = P_p((2x+y-1)/(1-y)) (1-y)^p,
//!
//! which satisfies the polynomial recurrence
//!
//!   (p+1) phi_{p+1} = (2p+1)(2x+y-1) phi_p - p (1-y)^2 phi_{p-1},
//!
//! combined with Jacobi polynomials P_q^(2p+1,0)(2y-1). Gradients are
//! obtained by propagating value/derivative triples through the same
//! recurrences. Normalization constants are fixed numerically at
//! construction so the reference mass matrix is the identity to machine
//! precision.
//!
//! The edge basis is shifted Legendre on [0,1] with the analytic
//! normalization sqrt(2m+1).

use super::quadrature::triangle_quadrature;
use super::tri_dim;

/// Value and first derivatives of a bivariate polynomial expression.
#[derive(Debug, Clone, Copy)]
struct Dual2 {
    v: f64,
    dx: f64,
    dy: f64,
}

impl Dual2 {
    fn new(v: f64, dx: f64, dy: f64) -> Self {
        Dual2 { v, dx, dy }
    }

    fn constant(v: f64) -> Self {
        Dual2 { v, dx: 0.0, dy: 0.0 }
    }

    fn mul(self, o: Dual2) -> Self {
        Dual2 {
            v: self.v * o.v,
            dx: self.dx * o.v + self.v * o.dx,
            dy: self.dy * o.v + self.v * o.dy,
        }
    }

    fn scale(self, s: f64) -> Self {
        Dual2 { v: s * self.v, dx: s * self.dx, dy: s * self.dy }
    }

    fn sub(self, o: Dual2) -> Self {
        Dual2 { v: self.v - o.v, dx: self.dx - o.dx, dy: self.dy - o.dy }
    }
}

/// Jacobi polynomials P_q^(alpha,0) evaluated at a dual argument, for
/// q = 0..=qmax, appended to `out`.
fn jacobi_alpha0(alpha: f64, qmax: usize, s: Dual2, out: &mut Vec<Dual2>) {
    out.clear();
    out.push(Dual2::constant(1.0));
    if qmax == 0 {
        return;
    }
    // P_1^(a,0)(s) = ((a+2) s + a) / 2
    let p1 = s.scale(0.5 * (alpha + 2.0));
    out.push(Dual2::new(p1.v + 0.5 * alpha, p1.dx, p1.dy));
    for q in 2..=qmax {
        let qf = q as f64;
        let a = 2.0 * qf * (qf + alpha) * (2.0 * qf + alpha - 2.0);
        let b = 2.0 * qf + alpha - 1.0;
        let c = (2.0 * qf + alpha) * (2.0 * qf + alpha - 2.0);
        let d = alpha * alpha;
        let e = 2.0 * (qf + alpha - 1.0) * (qf - 1.0) * (2.0 * qf + alpha);
        let prev = out[q - 1];
        let prev2 = out[q - 2];
        let term = s.scale(c);
        let term = Dual2::new(term.v + d, term.dx, term.dy).mul(prev).scale(b);
        let res = term.sub(prev2.scale(e)).scale(1.0 / a);
        out.push(res);
    }
}

/// Orthonormal basis for P_k on the reference triangle.
#[derive(Debug, Clone)]
pub struct TriBasis {
    pub degree: usize,
    pub dim: usize,
    /// (p, q) index pairs in evaluation order (grouped by total degree).
    pairs: Vec<(usize, usize)>,
    /// 1/sqrt of the reference L2 norm squared per function.
    inv_norms: Vec<f64>,
}

impl TriBasis {
    pub fn new(degree: usize) -> TriBasis {
        let dim = tri_dim(degree);
        let mut pairs = Vec::with_capacity(dim);
        for total in 0..=degree {
            for p in 0..=total {
                pairs.push((p, total - p));
            }
        }
        let mut basis = TriBasis {
            degree,
            dim,
            pairs,
            inv_norms: vec![1.0; dim],
        };
        // Fix normalization numerically; the rule degree 2k integrates the
        // squared basis exactly.
        let quad = triangle_quadrature(2 * degree).expect("within supported degree");
        let mut norms2 = vec![0.0; dim];
        let mut vals = vec![0.0; dim];
        for (pt, w) in quad.points.iter().zip(&quad.weights) {
            basis.eval_raw(*pt, &mut vals);
            for (n2, v) in norms2.iter_mut().zip(&vals) {
                *n2 += w * v * v;
            }
        }
        basis.inv_norms = norms2.iter().map(|n2| 1.0 / n2.sqrt()).collect();
        basis
    }

    /// Evaluate the unnormalized family at a point.
    fn eval_raw(&self, p: [f64; 2], out: &mut [f64]) {
        let mut scratch = EvalScratch::default();
        self.eval_dual(p, &mut scratch);
        for (o, d) in out.iter_mut().zip(&scratch.funcs) {
            *o = d.v;
        }
    }

    fn eval_dual(&self, point: [f64; 2], scratch: &mut EvalScratch) {
        let (x, y) = (point[0], point[1]);
        let t = Dual2::new(2.0 * x + y - 1.0, 2.0, 1.0);
        let omy = Dual2::new(1.0 - y, 0.0, -1.0);
        let omy2 = omy.mul(omy);
        let b = Dual2::new(2.0 * y - 1.0, 0.0, 2.0);

        // phi_p by the scaled Legendre recurrence.
        let phis = &mut scratch.phis;
        phis.clear();
        phis.push(Dual2::constant(1.0));
        if self.degree >= 1 {
            phis.push(t);
        }
        for p in 1..self.degree {
            let pf = p as f64;
            let next = t
                .mul(phis[p])
                .scale(2.0 * pf + 1.0)
                .sub(omy2.mul(phis[p - 1]).scale(pf))
                .scale(1.0 / (pf + 1.0));
            phis.push(next);
        }

        scratch.funcs.clear();
        for &(p, q) in &self.pairs {
            let alpha = 2.0 * p as f64 + 1.0;
            jacobi_alpha0(alpha, q, b, &mut scratch.jac);
            scratch.funcs.push(phis[p].mul(scratch.jac[q]));
        }
    }

    /// Values of all basis functions at `point`.
    pub fn eval(&self, point: [f64; 2], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut scratch = EvalScratch::default();
        self.eval_dual(point, &mut scratch);
        for i in 0..self.dim {
            out[i] = scratch.funcs[i].v * self.inv_norms[i];
        }
    }

    /// Values and reference gradients of all basis functions at `point`.
    pub fn eval_with_grad(&self, point: [f64; 2], vals: &mut [f64], grads: &mut [[f64; 2]]) {
        debug_assert_eq!(vals.len(), self.dim);
        debug_assert_eq!(grads.len(), self.dim);
        let mut scratch = EvalScratch::default();
        self.eval_dual(point, &mut scratch);
        for i in 0..self.dim {
            let d = scratch.funcs[i];
            vals[i] = d.v * self.inv_norms[i];
            grads[i] = [d.dx * self.inv_norms[i], d.dy * self.inv_norms[i]];
        }
    }

    /// Tabulate values and reference gradients at a list of points,
    /// row-major (point index fastest over basis index).
    pub fn tabulate(&self, points: &[[f64; 2]]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let mut vals = vec![0.0; points.len() * self.dim];
        let mut grads = vec![[0.0; 2]; points.len() * self.dim];
        for (q, pt) in points.iter().enumerate() {
            self.eval_with_grad(
                *pt,
                &mut vals[q * self.dim..(q + 1) * self.dim],
                &mut grads[q * self.dim..(q + 1) * self.dim],
            );
        }
        (vals, grads)
    }
}

#[derive(Default)]
struct EvalScratch {
    phis: Vec<Dual2>,
    jac: Vec<Dual2>,
    funcs: Vec<Dual2>,
}

/// Orthonormal Legendre basis for P_k on the reference edge [0,1].
#[derive(Debug, Clone)]
pub struct EdgeBasis {
    pub degree: usize,
    pub dim: usize,
}

impl EdgeBasis {
    pub fn new(degree: usize) -> EdgeBasis {
        EdgeBasis { degree, dim: degree + 1 }
    }

    /// Values of all basis functions at parameter t in [0,1].
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let s = 2.0 * t - 1.0;
        let mut p0 = 1.0;
        let mut p1 = s;
        for m in 0..=self.degree {
            let pm = match m {
                0 => 1.0,
                1 => s,
                _ => {
                    let mf = m as f64;
                    let p2 = ((2.0 * mf - 1.0) * s * p1 - (mf - 1.0) * p0) / mf;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            out[m] = pm * (2.0 * m as f64 + 1.0).sqrt();
        }
    }

    /// Values and d/dt derivatives at t.
    pub fn eval_with_deriv(&self, t: f64, vals: &mut [f64], derivs: &mut [f64]) {
        let s = 2.0 * t - 1.0;
        let mut p = vec![0.0; self.dim];
        let mut dp = vec![0.0; self.dim];
        p[0] = 1.0;
        dp[0] = 0.0;
        if self.degree >= 1 {
            p[1] = s;
            dp[1] = 1.0;
        }
        for m in 2..=self.degree {
            let mf = m as f64;
            p[m] = ((2.0 * mf - 1.0) * s * p[m - 1] - (mf - 1.0) * p[m - 2]) / mf;
            dp[m] = ((2.0 * mf - 1.0) * (p[m - 1] + s * dp[m - 1]) - (mf - 1.0) * dp[m - 2]) / mf;
        }
        for m in 0..=self.degree {
            let c = (2.0 * m as f64 + 1.0).sqrt();
            vals[m] = c * p[m];
            // d/dt = 2 d/ds
            derivs[m] = 2.0 * c * dp[m];
        }
    }

    pub fn tabulate(&self, points: &[f64]) -> Vec<f64> {
        let mut vals = vec![0.0; points.len() * self.dim];
        for (q, t) in points.iter().enumerate() {
            self.eval(*t, &mut vals[q * self.dim..(q + 1) * self.dim]);
        }
        vals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::quadrature::{edge_quadrature, triangle_quadrature};

    #[test]
    fn tri_mass_matrix_is_identity() {
        for k in 0..=4 {
            let basis = TriBasis::new(k);
            let quad = triangle_quadrature(2 * k).unwrap();
            let dim = basis.dim;
            let mut mass = vec![0.0; dim * dim];
            let mut vals = vec![0.0; dim];
            for (pt, w) in quad.points.iter().zip(&quad.weights) {
                basis.eval(*pt, &mut vals);
                for i in 0..dim {
                    for j in 0..dim {
                        mass[i * dim + j] += w * vals[i] * vals[j];
                    }
                }
            }
            for i in 0..dim {
                for j in 0..dim {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (mass[i * dim + j] - expect).abs() < 1e-12,
                        "k={k} mass[{i}][{j}] = {}",
                        mass[i * dim + j]
                    );
                }
            }
        }
    }

    #[test]
    fn edge_mass_matrix_is_identity() {
        for k in 0..=5 {
            let basis = EdgeBasis::new(k);
            let quad = edge_quadrature(2 * k).unwrap();
            let dim = basis.dim;
            let mut mass = vec![0.0; dim * dim];
            let mut vals = vec![0.0; dim];
            for (t, w) in quad.points.iter().zip(&quad.weights) {
                basis.eval(*t, &mut vals);
                for i in 0..dim {
                    for j in 0..dim {
                        mass[i * dim + j] += w * vals[i] * vals[j];
                    }
                }
            }
            for i in 0..dim {
                for j in 0..dim {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((mass[i * dim + j] - expect).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn tri_gradients_match_finite_differences() {
        let basis = TriBasis::new(3);
        let pts = [[0.21, 0.33], [0.05, 0.61], [0.4, 0.1]];
        let h = 1e-6;
        let mut vals = vec![0.0; basis.dim];
        let mut grads = vec![[0.0; 2]; basis.dim];
        let mut vp = vec![0.0; basis.dim];
        let mut vm = vec![0.0; basis.dim];
        for pt in pts {
            basis.eval_with_grad(pt, &mut vals, &mut grads);
            for d in 0..2 {
                let mut pp = pt;
                let mut pm = pt;
                pp[d] += h;
                pm[d] -= h;
                basis.eval(pp, &mut vp);
                basis.eval(pm, &mut vm);
                for i in 0..basis.dim {
                    let fd = (vp[i] - vm[i]) / (2.0 * h);
                    let scale = grads[i][d].abs().max(1.0);
                    assert!(
                        (grads[i][d] - fd).abs() < 1e-6 * scale,
                        "basis {i} dir {d}: {} vs fd {}",
                        grads[i][d],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn edge_derivatives_match_finite_differences() {
        let basis = EdgeBasis::new(4);
        let h = 1e-6;
        let mut vals = vec![0.0; basis.dim];
        let mut ders = vec![0.0; basis.dim];
        let mut vp = vec![0.0; basis.dim];
        let mut vm = vec![0.0; basis.dim];
        for t in [0.13, 0.5, 0.88] {
            basis.eval_with_deriv(t, &mut vals, &mut ders);
            basis.eval(t + h, &mut vp);
            basis.eval(t - h, &mut vm);
            for i in 0..basis.dim {
                let fd = (vp[i] - vm[i]) / (2.0 * h);
                assert!((ders[i] - fd).abs() < 1e-5 * ders[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn spans_polynomials() {
        // The degree-k family must reproduce monomials: project x^a y^b onto
        // the basis and evaluate back at a probe point.
        let k = 3;
        let basis = TriBasis::new(k);
        let quad = triangle_quadrature(2 * k).unwrap();
        let probe = [0.17, 0.29];
        let mut vals = vec![0.0; basis.dim];
        for a in 0..=k {
            for b in 0..=(k - a) {
                let f = |p: [f64; 2]| p[0].powi(a as i32) * p[1].powi(b as i32);
                let mut coef = vec![0.0; basis.dim];
                for (pt, w) in quad.points.iter().zip(&quad.weights) {
                    basis.eval(*pt, &mut vals);
                    for i in 0..basis.dim {
                        coef[i] += w * f(*pt) * vals[i];
                    }
                }
                basis.eval(probe, &mut vals);
                let recon: f64 = coef.iter().zip(&vals).map(|(c, v)| c * v).sum();
                assert!((recon - f(probe)).abs() < 1e-12);
            }
        }
    }
}
