//! Precomputed basis tables at quadrature points.
//!
//! Every triangle of the structured mesh is a translate of one of two
//! congruence classes (lower / upper), so basis values, physical gradients
//! and quadrature weights are tabulated once per class and shared by all
//! elements. Facet traces are tabulated per (class, local edge, orientation)
//! using the global facet parametrization, so both sides of a facet see the
//! same physical quadrature points.

use super::basis::{EdgeBasis, TriBasis};
use super::quadrature::{edge_quadrature, triangle_quadrature, EdgeQuadRule, TriQuadRule};
use crate::mesh::{ref_edge_endpoints, Mesh, TriClass};
use crate::Result;
use std::collections::BTreeMap;

/// Volume tables for one congruence class.
#[derive(Debug, Clone)]
pub struct ClassVolTable {
    pub nq: usize,
    /// Physical quadrature weights (reference weight times det J).
    pub weights: Vec<f64>,
    /// J xi for each reference point; physical point = element v0 + this.
    pub offsets: Vec<[f64; 2]>,
    /// Basis values, nq x dim.
    pub vals: Vec<f64>,
    /// Physical gradients, nq x dim.
    pub grads: Vec<[f64; 2]>,
}

/// Trace tables on one local edge for one traversal orientation.
#[derive(Debug, Clone)]
pub struct FacetTraceTable {
    /// Basis values at the facet quadrature points, nq x dim.
    pub vals: Vec<f64>,
    /// Physical gradients at the facet quadrature points, nq x dim.
    pub grads: Vec<[f64; 2]>,
}

/// All tables for one polynomial degree on one mesh.
#[derive(Debug, Clone)]
pub struct SpaceTables {
    pub degree: usize,
    pub dim: usize,
    pub basis: TriBasis,
    /// Indexed by class (Lower = 0, Upper = 1).
    pub vol: [ClassVolTable; 2],
    /// Indexed by [class][local_edge][orientation] with orientation 0 when
    /// the local edge direction matches the global facet parametrization.
    pub facet: [[[FacetTraceTable; 2]; 3]; 2],
}

/// Facet-polynomial values at the edge quadrature nodes (parametrization is
/// global, hence one table for all facets).
#[derive(Debug, Clone)]
pub struct EdgeSpaceTable {
    pub degree: usize,
    pub dim: usize,
    pub basis: EdgeBasis,
    /// nq x dim.
    pub vals: Vec<f64>,
    /// d/dt derivatives, nq x dim.
    pub derivs: Vec<f64>,
}

/// Bundle of quadrature rules and tables shared by the assembly routines.
#[derive(Debug, Clone)]
pub struct MeshTables {
    pub vol_rule: TriQuadRule,
    pub edge_rule: EdgeQuadRule,
    /// Cell spaces by degree.
    pub cell: BTreeMap<usize, SpaceTables>,
    /// Facet spaces by degree.
    pub edge: BTreeMap<usize, EdgeSpaceTable>,
    /// Per-class Jacobians of the structured mesh.
    pub class_jac: [[[f64; 2]; 2]; 2],
    pub det_jac: f64,
}

impl MeshTables {
    /// Build tables for the given cell/facet degrees with quadrature of the
    /// requested exactness.
    pub fn build(
        mesh: &Mesh,
        cell_degrees: &[usize],
        edge_degrees: &[usize],
        quad_degree: usize,
    ) -> Result<MeshTables> {
        let vol_rule = triangle_quadrature(quad_degree)?;
        let edge_rule = edge_quadrature(quad_degree)?;

        let n = mesh.n as f64;
        let h = 1.0 / n;
        // Lower triangle (A, B, C) and upper triangle (A, C, D) of each grid
        // square; both have det J = h^2.
        let class_jac = [[[h, h], [0.0, h]], [[h, 0.0], [h, h]]];
        let det_jac = h * h;

        let mut cell = BTreeMap::new();
        for &k in cell_degrees {
            if cell.contains_key(&k) {
                continue;
            }
            let basis = TriBasis::new(k);
            let mut vol_tables = Vec::with_capacity(2);
            let mut facet_tables = Vec::with_capacity(2);
            for class in [TriClass::Lower, TriClass::Upper] {
                let jac = class_jac[class_index(class)];
                let inv_jac_t = inv_transpose(jac, det_jac);

                let (vals, ref_grads) = basis.tabulate(&vol_rule.points);
                let grads = to_physical_grads(&ref_grads, inv_jac_t);
                let weights = vol_rule.weights.iter().map(|w| w * det_jac).collect();
                let offsets = vol_rule
                    .points
                    .iter()
                    .map(|xi| apply(jac, *xi))
                    .collect();
                vol_tables.push(ClassVolTable {
                    nq: vol_rule.points.len(),
                    weights,
                    offsets,
                    vals,
                    grads,
                });

                let mut per_edge = Vec::with_capacity(3);
                for le in 0..3 {
                    let (r0, r1) = ref_edge_endpoints(le);
                    let mut orients = Vec::with_capacity(2);
                    for reversed in [false, true] {
                        let (a, b) = if reversed { (r1, r0) } else { (r0, r1) };
                        let pts: Vec<[f64; 2]> = edge_rule
                            .points
                            .iter()
                            .map(|t| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
                            .collect();
                        let (vals, ref_grads) = basis.tabulate(&pts);
                        let grads = to_physical_grads(&ref_grads, inv_jac_t);
                        orients.push(FacetTraceTable { vals, grads });
                    }
                    per_edge.push([orients.remove(0), orients.remove(0)]);
                }
                facet_tables.push(per_edge);
            }
            let f0 = facet_tables.remove(0);
            let f1 = facet_tables.remove(0);
            cell.insert(
                k,
                SpaceTables {
                    degree: k,
                    dim: basis.dim,
                    basis,
                    vol: [vol_tables.remove(0), vol_tables.remove(0)],
                    facet: [to_array3(f0), to_array3(f1)],
                },
            );
        }

        let mut edge = BTreeMap::new();
        for &k in edge_degrees {
            if edge.contains_key(&k) {
                continue;
            }
            let basis = EdgeBasis::new(k);
            let nq = edge_rule.points.len();
            let mut vals = vec![0.0; nq * basis.dim];
            let mut derivs = vec![0.0; nq * basis.dim];
            for (q, t) in edge_rule.points.iter().enumerate() {
                let (v, d) = (&mut vals[q * basis.dim..(q + 1) * basis.dim],
                              &mut derivs[q * basis.dim..(q + 1) * basis.dim]);
                basis.eval_with_deriv(*t, v, d);
            }
            edge.insert(
                k,
                EdgeSpaceTable { degree: k, dim: basis.dim, basis, vals, derivs },
            );
        }

        Ok(MeshTables {
            vol_rule,
            edge_rule,
            cell,
            edge,
            class_jac,
            det_jac,
        })
    }

    pub fn cell_space(&self, degree: usize) -> &SpaceTables {
        self.cell
            .get(&degree)
            .unwrap_or_else(|| panic!("no cell tables built for degree {degree}"))
    }

    pub fn edge_space(&self, degree: usize) -> &EdgeSpaceTable {
        self.edge
            .get(&degree)
            .unwrap_or_else(|| panic!("no edge tables built for degree {degree}"))
    }
}

pub fn class_index(class: TriClass) -> usize {
    match class {
        TriClass::Lower => 0,
        TriClass::Upper => 1,
    }
}

fn apply(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn inv_transpose(jac: [[f64; 2]; 2], det: f64) -> [[f64; 2]; 2] {
    // (J^{-1})^T for a 2x2 Jacobian.
    [
        [jac[1][1] / det, -jac[1][0] / det],
        [-jac[0][1] / det, jac[0][0] / det],
    ]
}

fn to_physical_grads(ref_grads: &[[f64; 2]], inv_jac_t: [[f64; 2]; 2]) -> Vec<[f64; 2]> {
    ref_grads.iter().map(|g| apply(inv_jac_t, *g)).collect()
}

fn to_array3(mut v: Vec<[FacetTraceTable; 2]>) -> [[FacetTraceTable; 2]; 3] {
    let a = v.remove(0);
    let b = v.remove(0);
    let c = v.remove(0);
    [a, b, c]
}
