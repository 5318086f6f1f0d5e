//! L2 projections and interpolation operators.
//!
//! Cell and facet fields are stored as coefficients with respect to the
//! reference-orthonormal bases, so element L2 projections reduce to weighted
//! sums (the physical mass matrix is det(J) times the identity) and physical
//! norms are det(J) (resp. facet length) times the coefficient norm.
//!
//! `bdm_interpolate` realizes the moment-based interpolation onto the
//! piecewise-[P_k]^2 velocity space: facet normal moments against P_k on
//! every edge, interior moments against gradients of P_{k-1}, and interior
//! moments against the divergence-free "bubble curl" fields curl(b q),
//! q in P_{k-2}, where b is the cubic element bubble. Matching facet moments
//! on both sides of a facet makes the interpolant H(div)-conforming whenever
//! the input has continuous normal traces.

use super::basis::{EdgeBasis, TriBasis};
use super::dense::{DenseLu, DMat};
use super::quadrature::{EdgeQuadRule, TriQuadRule};
use crate::mesh::{ElementGeometry, FacetKind, Mesh};
use crate::{Error, Result};

/// L2 projection of a scalar function onto P_degree(K); returns coefficients
/// in the reference-orthonormal basis.
pub fn l2_project_element(
    f: &dyn Fn([f64; 2]) -> f64,
    geom: &ElementGeometry,
    basis: &TriBasis,
    quad: &TriQuadRule,
) -> Vec<f64> {
    let mut coefs = vec![0.0; basis.dim];
    let mut vals = vec![0.0; basis.dim];
    for (xi, w) in quad.points.iter().zip(&quad.weights) {
        let x = geom.to_physical(*xi);
        let fv = f(x);
        basis.eval(*xi, &mut vals);
        for i in 0..basis.dim {
            coefs[i] += w * fv * vals[i];
        }
    }
    coefs
}

/// L2 projection of a scalar function onto P_degree(F) for the facet with
/// endpoints `p0`, `p1` (parametrized from `p0` to `p1`).
pub fn l2_project_facet(
    f: &dyn Fn([f64; 2]) -> f64,
    p0: [f64; 2],
    p1: [f64; 2],
    basis: &EdgeBasis,
    quad: &EdgeQuadRule,
) -> Vec<f64> {
    let mut coefs = vec![0.0; basis.dim];
    let mut vals = vec![0.0; basis.dim];
    for (t, w) in quad.points.iter().zip(&quad.weights) {
        let x = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
        let fv = f(x);
        basis.eval(*t, &mut vals);
        for i in 0..basis.dim {
            coefs[i] += w * fv * vals[i];
        }
    }
    coefs
}

/// Evaluate a coefficient vector against basis values at one point.
pub fn eval_field(coefs: &[f64], vals: &[f64]) -> f64 {
    coefs.iter().zip(vals).map(|(c, v)| c * v).sum()
}

/// Moment-based interpolation of a vector field onto [P_k(K)]^2 per element.
/// Returns, per element, the 2 * dim(P_k) coefficients (component-major).
pub fn bdm_interpolate(
    u: &dyn Fn([f64; 2]) -> [f64; 2],
    mesh: &Mesh,
    k: usize,
    vol_quad: &TriQuadRule,
    edge_quad: &EdgeQuadRule,
) -> Result<Vec<Vec<f64>>> {
    assert!(k >= 1, "velocity degree must be at least 1");
    let basis = TriBasis::new(k);
    let basis_km1 = TriBasis::new(k - 1);
    let basis_km2 = (k >= 2).then(|| TriBasis::new(k - 2));
    let edge_basis = EdgeBasis::new(k);
    let dim = basis.dim;
    let ndof = 2 * dim;

    let mut out = Vec::with_capacity(mesh.n_elements());
    for (e, tri) in mesh.tris.iter().enumerate() {
        let geom = mesh.element_geometry(e)?;
        let mut mat = DMat::zeros(ndof, ndof);
        let mut rhs = vec![0.0; ndof];
        let mut row = 0;

        // Facet normal moments: int_F ebar_m (w . n_F), using the global
        // facet parametrization and stored normal so both adjacent elements
        // build identical functionals.
        let mut evals = vec![0.0; edge_basis.dim];
        let mut bvals = vec![0.0; dim];
        for le in 0..3 {
            let fid = tri.facets[le];
            let facet = &mesh.facets[fid];
            let (p0, p1) = mesh.facet_points(fid);
            let n = facet.normal;
            let len = facet.length;
            for m in 0..edge_basis.dim {
                for (t, w) in edge_quad.points.iter().zip(&edge_quad.weights) {
                    let x = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                    let xi = geom.to_reference(x);
                    edge_basis.eval(*t, &mut evals);
                    basis.eval(xi, &mut bvals);
                    let scale = w * len * evals[m];
                    for i in 0..dim {
                        // Component-major: dofs 0..dim are the x-component.
                        mat.a[row * ndof + i] += scale * bvals[i] * n[0];
                        mat.a[row * ndof + dim + i] += scale * bvals[i] * n[1];
                    }
                    let uv = u(x);
                    rhs[row] += scale * (uv[0] * n[0] + uv[1] * n[1]);
                }
                row += 1;
            }
        }

        // Interior moments against grad q, q in P_{k-1} minus constants.
        let mut gvals = vec![0.0; basis_km1.dim];
        let mut ggrads = vec![[0.0; 2]; basis_km1.dim];
        let mut bgrads = vec![[0.0; 2]; dim];
        for iq in 1..basis_km1.dim {
            for (xi, w) in vol_quad.points.iter().zip(&vol_quad.weights) {
                let x = geom.to_physical(*xi);
                basis_km1.eval_with_grad(*xi, &mut gvals, &mut ggrads);
                basis.eval_with_grad(*xi, &mut bvals, &mut bgrads);
                let g = phys_grad(&geom, ggrads[iq]);
                let scale = w * geom.det_jac;
                for i in 0..dim {
                    mat.a[row * ndof + i] += scale * bvals[i] * g[0];
                    mat.a[row * ndof + dim + i] += scale * bvals[i] * g[1];
                }
                let uv = u(x);
                rhs[row] += scale * (uv[0] * g[0] + uv[1] * g[1]);
            }
            row += 1;
        }

        // Interior moments against curl(b q), q in P_{k-2}; b is the cubic
        // bubble in physical barycentric coordinates, so these fields are
        // divergence free with zero normal trace.
        if let Some(basis_km2) = &basis_km2 {
            let bary = barycentric_gradients(&geom);
            let mut qvals = vec![0.0; basis_km2.dim];
            let mut qgrads = vec![[0.0; 2]; basis_km2.dim];
            for iq in 0..basis_km2.dim {
                for (xi, w) in vol_quad.points.iter().zip(&vol_quad.weights) {
                    let x = geom.to_physical(*xi);
                    basis_km2.eval_with_grad(*xi, &mut qvals, &mut qgrads);
                    basis.eval(*xi, &mut bvals);
                    let (b, gb) = bubble(&geom, &bary, x);
                    let q = qvals[iq];
                    let gq = phys_grad(&geom, qgrads[iq]);
                    // grad(b q), then rotate to get curl(b q) = (d_y, -d_x).
                    let gx = gb[0] * q + b * gq[0];
                    let gy = gb[1] * q + b * gq[1];
                    let curl = [gy, -gx];
                    let scale = w * geom.det_jac;
                    for i in 0..dim {
                        mat.a[row * ndof + i] += scale * bvals[i] * curl[0];
                        mat.a[row * ndof + dim + i] += scale * bvals[i] * curl[1];
                    }
                    let uv = u(x);
                    rhs[row] += scale * (uv[0] * curl[0] + uv[1] * curl[1]);
                }
                row += 1;
            }
        }

        debug_assert_eq!(row, ndof);
        let lu = DenseLu::new(&mat).map_err(|_| {
            Error::Solver(format!("velocity interpolation moment system singular on element {e}"))
        })?;
        lu.solve(&mut rhs);
        out.push(rhs);
    }
    Ok(out)
}

/// Interpolant onto the velocity trace space: facet-wise L2 projection on
/// non-interface facets of the Stokes sub-mesh, and the trace of the
/// element interpolant from the Stokes side on interface facets.
/// Returns per ℱ^s facet `Some(coefficients)` (component-major, 2(k+1)).
pub fn interpolate_vbar(
    u: &dyn Fn([f64; 2]) -> [f64; 2],
    cell_interp: &[Vec<f64>],
    mesh: &Mesh,
    k: usize,
    edge_quad: &EdgeQuadRule,
) -> Vec<Option<Vec<f64>>> {
    let edge_basis = EdgeBasis::new(k);
    let cell_basis = TriBasis::new(k);
    let dim = cell_basis.dim;
    let mut out = vec![None; mesh.n_facets()];
    let mut evals = vec![0.0; edge_basis.dim];
    let mut bvals = vec![0.0; dim];
    for (fid, facet) in mesh.facets.iter().enumerate() {
        if !facet.kind.in_f_s() {
            continue;
        }
        let (p0, p1) = mesh.facet_points(fid);
        let mut coefs = vec![0.0; 2 * edge_basis.dim];
        if facet.kind == FacetKind::Interface {
            // Trace of the interpolated Stokes-side cell polynomial.
            let e = facet.elems[0];
            let geom = mesh.element_geometry(e).expect("valid element");
            let cell = &cell_interp[e];
            for (t, w) in edge_quad.points.iter().zip(&edge_quad.weights) {
                let x = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                let xi = geom.to_reference(x);
                cell_basis.eval(xi, &mut bvals);
                edge_basis.eval(*t, &mut evals);
                let ux: f64 = (0..dim).map(|i| cell[i] * bvals[i]).sum();
                let uy: f64 = (0..dim).map(|i| cell[dim + i] * bvals[i]).sum();
                for m in 0..edge_basis.dim {
                    coefs[m] += w * ux * evals[m];
                    coefs[edge_basis.dim + m] += w * uy * evals[m];
                }
            }
        } else {
            let cx = l2_project_facet(&|x| u(x)[0], p0, p1, &edge_basis, edge_quad);
            let cy = l2_project_facet(&|x| u(x)[1], p0, p1, &edge_basis, edge_quad);
            coefs[..edge_basis.dim].copy_from_slice(&cx);
            coefs[edge_basis.dim..].copy_from_slice(&cy);
        }
        out[fid] = Some(coefs);
    }
    out
}

/// Divergence coefficients (degree k-1 basis) of a cell velocity field given
/// component-major degree-k coefficients. Exact: div maps P_k^2 into P_{k-1}.
pub fn divergence_coefficients(
    cell: &[f64],
    geom: &ElementGeometry,
    basis_k: &TriBasis,
    basis_km1: &TriBasis,
    quad: &TriQuadRule,
) -> Vec<f64> {
    let dim = basis_k.dim;
    let mut vals_k = vec![0.0; dim];
    let mut grads_k = vec![[0.0; 2]; dim];
    let mut vals_m = vec![0.0; basis_km1.dim];
    let mut coefs = vec![0.0; basis_km1.dim];
    for (xi, w) in quad.points.iter().zip(&quad.weights) {
        basis_k.eval_with_grad(*xi, &mut vals_k, &mut grads_k);
        basis_km1.eval(*xi, &mut vals_m);
        let mut div = 0.0;
        for i in 0..dim {
            let g = phys_grad(geom, grads_k[i]);
            div += cell[i] * g[0] + cell[dim + i] * g[1];
        }
        for m in 0..basis_km1.dim {
            coefs[m] += w * div * vals_m[m];
        }
    }
    coefs
}

fn phys_grad(geom: &ElementGeometry, ref_grad: [f64; 2]) -> [f64; 2] {
    let inv = geom.inv_jac;
    [
        inv[0][0] * ref_grad[0] + inv[1][0] * ref_grad[1],
        inv[0][1] * ref_grad[0] + inv[1][1] * ref_grad[1],
    ]
}

/// Gradients of the barycentric coordinates of an element.
fn barycentric_gradients(geom: &ElementGeometry) -> [[f64; 2]; 3] {
    // lambda_i is affine with lambda_i(v_j) = delta_ij.
    let [a, b, c] = geom.coords;
    let det = geom.det_jac;
    [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ]
}

/// Cubic bubble b = l1 l2 l3 and its physical gradient at x.
fn bubble(geom: &ElementGeometry, bary_grads: &[[f64; 2]; 3], x: [f64; 2]) -> (f64, [f64; 2]) {
    let xi = geom.to_reference(x);
    let l = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
    let b = l[0] * l[1] * l[2];
    let mut g = [0.0, 0.0];
    for i in 0..3 {
        let prod = match i {
            0 => l[1] * l[2],
            1 => l[0] * l[2],
            _ => l[0] * l[1],
        };
        g[0] += prod * bary_grads[i][0];
        g[1] += prod * bary_grads[i][1];
    }
    (b, g)
}
