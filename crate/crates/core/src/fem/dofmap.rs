//! Global degree-of-freedom maps for the flow and transport systems.
//!
//! Cell unknowns are numbered element by element (they are condensable), and
//! facet unknowns get their own numbering (the "facet system"). The velocity
//! trace space lives only on facets of the Stokes sub-mesh; the pressure
//! trace spaces live on their respective sub-meshes and both exist on the
//! interface. The optional pressure-mean multiplier is the last facet
//! unknown.

use super::{edge_dim, tri_dim};
use crate::mesh::{FacetKind, Mesh};

/// DOF layout of the Stokes/Darcy system.
#[derive(Debug, Clone)]
pub struct FlowDofs {
    /// Velocity degree.
    pub k: usize,
    /// dim P_k (velocity component), dim P_{k-1} (pressure).
    pub dim_u: usize,
    pub dim_p: usize,
    /// Facet polynomial dimension, k+1 (velocity trace per component and
    /// pressure traces share the degree).
    pub dim_bar: usize,
    /// Cell block size per element: 2 dim_u + dim_p.
    pub cell_block: usize,
    pub n_elems: usize,
    pub n_cell: usize,
    /// Start of the velocity-trace block per facet (facets of F^s only).
    pub ubar_offset: Vec<Option<usize>>,
    /// Start of the Stokes pressure-trace block per facet.
    pub pbar_s_offset: Vec<Option<usize>>,
    /// Start of the Darcy pressure-trace block per facet.
    pub pbar_d_offset: Vec<Option<usize>>,
    /// Facet index of the pressure-mean multiplier, if active.
    pub lambda: Option<usize>,
    /// Total facet unknowns (including the multiplier).
    pub n_facet: usize,
}

impl FlowDofs {
    pub fn build(mesh: &Mesh, k: usize, with_mean_constraint: bool) -> FlowDofs {
        assert!(k >= 1);
        let dim_u = tri_dim(k);
        let dim_p = tri_dim(k - 1);
        let dim_bar = edge_dim(k);
        let cell_block = 2 * dim_u + dim_p;
        let n_elems = mesh.n_elements();

        let mut ubar_offset = vec![None; mesh.n_facets()];
        let mut pbar_s_offset = vec![None; mesh.n_facets()];
        let mut pbar_d_offset = vec![None; mesh.n_facets()];
        let mut next = 0;
        for (fid, facet) in mesh.facets.iter().enumerate() {
            if facet.kind.in_f_s() {
                ubar_offset[fid] = Some(next);
                next += 2 * dim_bar;
                pbar_s_offset[fid] = Some(next);
                next += dim_bar;
            }
            if facet.kind.in_f_d() {
                pbar_d_offset[fid] = Some(next);
                next += dim_bar;
            }
        }
        let lambda = with_mean_constraint.then(|| {
            let idx = next;
            next += 1;
            idx
        });

        FlowDofs {
            k,
            dim_u,
            dim_p,
            dim_bar,
            cell_block,
            n_elems,
            n_cell: n_elems * cell_block,
            ubar_offset,
            pbar_s_offset,
            pbar_d_offset,
            lambda,
            n_facet: next,
        }
    }

    /// Cell dof of velocity component `comp`, mode `i`, in element `e`.
    #[inline]
    pub fn u_dof(&self, e: usize, comp: usize, i: usize) -> usize {
        e * self.cell_block + comp * self.dim_u + i
    }

    /// Cell dof of pressure mode `i` in element `e`.
    #[inline]
    pub fn p_dof(&self, e: usize, i: usize) -> usize {
        e * self.cell_block + 2 * self.dim_u + i
    }
}

/// DOF layout of the transport system.
#[derive(Debug, Clone)]
pub struct TransportDofs {
    pub k: usize,
    pub dim_c: usize,
    pub dim_bar: usize,
    pub n_elems: usize,
    pub n_cell: usize,
    /// Start of the trace block per facet (all facets carry one).
    pub cbar_offset: Vec<usize>,
    pub n_facet: usize,
}

impl TransportDofs {
    pub fn build(mesh: &Mesh, k: usize) -> TransportDofs {
        let dim_c = tri_dim(k);
        let dim_bar = edge_dim(k);
        let n_elems = mesh.n_elements();
        let cbar_offset = (0..mesh.n_facets()).map(|fid| fid * dim_bar).collect();
        TransportDofs {
            k,
            dim_c,
            dim_bar,
            n_elems,
            n_cell: n_elems * dim_c,
            cbar_offset,
            n_facet: mesh.n_facets() * dim_bar,
        }
    }

    #[inline]
    pub fn c_dof(&self, e: usize, i: usize) -> usize {
        e * self.dim_c + i
    }
}

/// Which facet unknowns are eliminated (strongly imposed) and which are free.
/// The structure is fixed per configuration; the prescribed values vary with
/// time and are supplied separately at assembly.
#[derive(Debug, Clone)]
pub struct ConstraintLayout {
    pub is_fixed: Vec<bool>,
    /// Free-system index per facet dof (valid where !is_fixed).
    pub free_index: Vec<usize>,
    pub n_free: usize,
}

impl ConstraintLayout {
    pub fn new(is_fixed: Vec<bool>) -> ConstraintLayout {
        let mut free_index = vec![usize::MAX; is_fixed.len()];
        let mut next = 0;
        for (i, fixed) in is_fixed.iter().enumerate() {
            if !fixed {
                free_index[i] = next;
                next += 1;
            }
        }
        ConstraintLayout { is_fixed, free_index, n_free: next }
    }

    pub fn all_free(n: usize) -> ConstraintLayout {
        ConstraintLayout::new(vec![false; n])
    }
}

/// Count facets of the Stokes sub-mesh (diagnostics and sizing).
pub fn count_f_s(mesh: &Mesh) -> usize {
    mesh.facets.iter().filter(|f| f.kind.in_f_s()).count()
}

/// Facets carrying both pressure traces (the interface).
pub fn count_doubled_pressure_facets(mesh: &Mesh) -> usize {
    mesh.facets
        .iter()
        .filter(|f| f.kind == FacetKind::Interface)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;

    #[test]
    fn flow_dof_counts_n4_k2() {
        let mesh = Mesh::structured(4).unwrap();
        let dofs = FlowDofs::build(&mesh, 2, true);
        assert_eq!(dofs.dim_u, 6);
        assert_eq!(dofs.dim_p, 3);
        assert_eq!(dofs.cell_block, 15);
        assert_eq!(dofs.n_cell, 32 * 15);
        // F^s facets: interior-s + interface + Stokes boundary.
        let f_s = count_f_s(&mesh);
        let f_d = mesh.facets.iter().filter(|f| f.kind.in_f_d()).count();
        let expected_facet = f_s * (2 * 3 + 3) + f_d * 3 + 1;
        assert_eq!(dofs.n_facet, expected_facet);
        // Interface facets carry both pressure traces.
        for &fid in &mesh.interface_facets {
            assert!(dofs.pbar_s_offset[fid].is_some());
            assert!(dofs.pbar_d_offset[fid].is_some());
            assert!(dofs.ubar_offset[fid].is_some());
        }
        // Velocity traces are absent from the Darcy-only facets.
        for (fid, facet) in mesh.facets.iter().enumerate() {
            if !facet.kind.in_f_s() {
                assert!(dofs.ubar_offset[fid].is_none());
                assert!(dofs.pbar_s_offset[fid].is_none());
            }
        }
    }

    #[test]
    fn transport_dof_counts() {
        let mesh = Mesh::structured(4).unwrap();
        let dofs = TransportDofs::build(&mesh, 1);
        assert_eq!(dofs.dim_c, 3);
        assert_eq!(dofs.n_cell, 32 * 3);
        assert_eq!(dofs.n_facet, 56 * 2);
    }

    #[test]
    fn constraint_layout_indexing() {
        let layout = ConstraintLayout::new(vec![false, true, false, false, true]);
        assert_eq!(layout.n_free, 3);
        assert_eq!(layout.free_index[0], 0);
        assert_eq!(layout.free_index[2], 1);
        assert_eq!(layout.free_index[3], 2);
    }
}
