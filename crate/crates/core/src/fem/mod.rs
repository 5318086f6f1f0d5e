//! Finite element core: reference bases, quadrature, DOF maps, projections
//! and interpolation operators.

pub mod basis;
pub mod dense;
pub mod dofmap;
pub mod projection;
pub mod quadrature;
pub mod tables;

pub use basis::{EdgeBasis, TriBasis};
pub use dofmap::{FlowDofs, TransportDofs};
pub use quadrature::{edge_quadrature, triangle_quadrature, EdgeQuadRule, TriQuadRule};
pub use tables::MeshTables;

/// Dimension of the polynomial space P_k on a triangle.
pub fn tri_dim(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// Dimension of the polynomial space P_k on an edge.
pub fn edge_dim(k: usize) -> usize {
    k + 1
}
