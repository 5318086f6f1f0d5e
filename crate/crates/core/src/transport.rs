//! Assembly and solution of one implicit transport step.
//!
//! Unknowns: cell concentration c (P_kc) and its trace cbar on every facet.
//! The advective form upwinds through the facet variable:
//!
//!   B_a(u; c, w) = - sum_K int_K c u . grad w
//!                 + sum_K int_dK c u.n (w - wbar)
//!                 - sum_K int_dK,in u.n (c - cbar)(w - wbar),
//!
//! where dK,in is the inflow part (u.n < 0, tested per quadrature point,
//! ties counted as outflow). The diffusive form is the interior-penalty
//! discretization with the velocity-dependent dispersion tensor evaluated
//! from the freshly solved flow field:
//!
//!   B_d(u; c, w) = sum_K int_K D(u) grad c . grad w
//!                 + sum_K (beta_tr / h_K) int_dK (n.D n)(c - cbar)(w - wbar)
//!                 - sum_K int_dK (D grad c).n (w - wbar)
//!                 - sum_K int_dK (D grad w).n (c - cbar).
//!
//! The porosity-weighted BDF time term, the production-well reaction term
//! g_p c w and the injection source c_I g_i complete the step. The natural
//! boundary condition constrains the diffusive flux only: on inflow parts
//! the facet equation drives cbar toward the clean upstream state, and on
//! outflow parts a closure term u.n cbar wbar makes cbar the interior trace
//! so advective mass leaves freely. Dirichlet concentration data
//! (manufactured runs) is imposed strongly on boundary trace DOFs instead.

use crate::fem::dense::DMat;
use crate::fem::dofmap::{ConstraintLayout, TransportDofs};
use crate::fem::projection::{l2_project_element, l2_project_facet};
use crate::fem::tables::{class_index, MeshTables};
use crate::flow::{dot, FlowState};
use crate::linsys::{factorize, ElemMat, Factorized, SystemMatrix, SystemRhs};
use crate::mesh::{Mesh, Region};
use crate::problem::{
    dispersion_tensor, DiffPenaltyWeight, Discretization, ProblemConfig, TransportBc,
};
use crate::fem::dofmap::FlowDofs;
use crate::Result;

/// Coefficient vectors of the concentration unknowns at one time level.
#[derive(Debug, Clone)]
pub struct ConcState {
    pub t: f64,
    /// Concentration degree (cell and trace).
    pub k: usize,
    pub dim_c: usize,
    pub dim_bar: usize,
    /// Element blocks of cell modes.
    pub cell: Vec<f64>,
    /// Facet trace coefficients (all facets), prescribed values merged.
    pub facet: Vec<f64>,
}

impl ConcState {
    pub fn zeros(dofs: &TransportDofs, t: f64) -> ConcState {
        ConcState {
            t,
            k: dofs.k,
            dim_c: dofs.dim_c,
            dim_bar: dofs.dim_bar,
            cell: vec![0.0; dofs.n_cell],
            facet: vec![0.0; dofs.n_facet],
        }
    }

    pub fn c_coeffs(&self, e: usize) -> &[f64] {
        &self.cell[e * self.dim_c..(e + 1) * self.dim_c]
    }

    pub fn cbar_coeffs(&self, fid: usize) -> &[f64] {
        &self.facet[fid * self.dim_bar..(fid + 1) * self.dim_bar]
    }

    /// L2 norm over the domain weighted by the regional porosity.
    pub fn weighted_l2(&self, mesh: &Mesh, det_jac: f64, phi_d: f64) -> f64 {
        let mut total = 0.0;
        for (e, tri) in mesh.tris.iter().enumerate() {
            let phi = match tri.region {
                Region::Stokes => 1.0,
                Region::Darcy => phi_d,
            };
            let c = self.c_coeffs(e);
            total += phi * det_jac * c.iter().map(|v| v * v).sum::<f64>();
        }
        total.sqrt()
    }
}

/// The transport discretization on one mesh.
pub struct TransportSolver {
    pub dofs: TransportDofs,
    pub layout: ConstraintLayout,
    pub disc: Discretization,
}

impl TransportSolver {
    pub fn new(mesh: &Mesh, problem: &ProblemConfig, disc: &Discretization) -> TransportSolver {
        let dofs = TransportDofs::build(mesh, disc.k_c);
        let dirichlet = matches!(problem.bc.transport, TransportBc::Dirichlet(_));
        let mut is_fixed = vec![false; dofs.n_facet];
        if dirichlet {
            for (fid, facet) in mesh.facets.iter().enumerate() {
                if facet.kind.is_boundary() {
                    for i in 0..dofs.dim_bar {
                        is_fixed[dofs.cbar_offset[fid] + i] = true;
                    }
                }
            }
        }
        let layout = ConstraintLayout::new(is_fixed);
        TransportSolver { dofs, layout, disc: disc.clone() }
    }

    /// Prescribed trace values at time `t`.
    pub fn fixed_values(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        t: f64,
    ) -> Vec<f64> {
        let mut vals = vec![0.0; self.dofs.n_facet];
        if let TransportBc::Dirichlet(g) = &problem.bc.transport {
            let basis = &tables.edge_space(self.dofs.k).basis;
            for (fid, facet) in mesh.facets.iter().enumerate() {
                if !facet.kind.is_boundary() {
                    continue;
                }
                let (p0, p1) = mesh.facet_points(fid);
                let coefs = l2_project_facet(&|x| g(x, t), p0, p1, basis, &tables.edge_rule);
                let off = self.dofs.cbar_offset[fid];
                vals[off..off + self.dofs.dim_bar].copy_from_slice(&coefs);
            }
        }
        vals
    }

    /// Assemble matrix and rhs for one implicit step at time `t`.
    ///
    /// `dt_coef` is the BDF leading coefficient over dt; `history_combo` is
    /// the weighted sum of previous cell states scaled by 1/dt (zero length
    /// for a steady form). The advective and diffusive forms use the
    /// just-solved flow state `u_flow`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        flow_dofs: &FlowDofs,
        u_flow: &FlowState,
        t: f64,
        dt_coef: f64,
        history_combo: Option<(&[f64], f64)>,
        fixed: &[f64],
        forms: TransportForms,
    ) -> (SystemMatrix, SystemRhs) {
        let dofs = &self.dofs;
        let layout = &self.layout;
        let k = dofs.k;
        let scs = tables.cell_space(k);
        let sus = tables.cell_space(flow_dofs.k);
        let ecs = tables.edge_space(k);
        let dim_c = dofs.dim_c;
        let dim_u = flow_dofs.dim_u;
        let nb = dofs.dim_bar;
        let nq_vol = tables.vol_rule.points.len();
        let nq_edge = tables.edge_rule.points.len();
        let beta_tr = self.disc.beta_tr;

        let mut matrix = SystemMatrix::new(dofs.n_elems, dim_c, layout.n_free);
        let mut b_c = vec![0.0; dofs.n_cell];
        let mut b_f = vec![0.0; layout.n_free];

        for (e, tri) in mesh.tris.iter().enumerate() {
            let ci = class_index(tri.class);
            let vol_c = &scs.vol[ci];
            let vol_u = &sus.vol[ci];
            let v0 = mesh.vertices[tri.verts[0]];
            let h_k = mesh.h_k(e);
            let phi = problem.porosity(tri.region);
            let (ux, uy) = u_flow.u_coeffs(flow_dofs, e);

            // Facet slots: the trace block of each local edge.
            let mut slots: Vec<usize> = Vec::with_capacity(3 * nb);
            for le in 0..3 {
                let off = dofs.cbar_offset[tri.facets[le]];
                for i in 0..nb {
                    slots.push(off + i);
                }
            }
            let ns = slots.len();
            let ntot = dim_c + ns;
            let mut local = DMat::zeros(ntot, ntot);
            let base = e * dim_c;

            for q in 0..nq_vol {
                let w = vol_c.weights[q];
                let x = [v0[0] + vol_c.offsets[q][0], v0[1] + vol_c.offsets[q][1]];
                let cvals = &vol_c.vals[q * dim_c..(q + 1) * dim_c];
                let cgrads = &vol_c.grads[q * dim_c..(q + 1) * dim_c];
                let uvals = &vol_u.vals[q * dim_u..(q + 1) * dim_u];
                let u = [dot(ux, uvals), dot(uy, uvals)];

                // Time term and production reaction.
                let mut mass_coef = 0.0;
                if forms.time && dt_coef != 0.0 {
                    mass_coef += phi * dt_coef;
                }
                if forms.wells && tri.region == Region::Darcy {
                    if let Some(g_p) = &problem.g_p {
                        mass_coef += g_p(x, t);
                    }
                }
                if mass_coef != 0.0 {
                    for i in 0..dim_c {
                        for j in 0..dim_c {
                            local.a[i * ntot + j] += w * mass_coef * cvals[i] * cvals[j];
                        }
                    }
                }

                // Advective volume term: -c u . grad w.
                if forms.advection {
                    for i in 0..dim_c {
                        let gi = cgrads[i];
                        let ugi = u[0] * gi[0] + u[1] * gi[1];
                        for j in 0..dim_c {
                            local.a[i * ntot + j] -= w * cvals[j] * ugi;
                        }
                    }
                }

                // Diffusive volume term: D grad c . grad w.
                if forms.diffusion {
                    let d = dispersion_tensor(&problem.dispersion, tri.region, u, problem.phi);
                    for i in 0..dim_c {
                        let gi = cgrads[i];
                        for j in 0..dim_c {
                            let gj = cgrads[j];
                            let dg = [
                                d[0][0] * gj[0] + d[0][1] * gj[1],
                                d[1][0] * gj[0] + d[1][1] * gj[1],
                            ];
                            local.a[i * ntot + j] += w * (dg[0] * gi[0] + dg[1] * gi[1]);
                        }
                    }
                }

                // Right-hand side: injection wells and manufactured source.
                if forms.wells && tri.region == Region::Darcy {
                    if let (Some(g_i), Some(c_inj)) = (&problem.g_i, &problem.c_inj) {
                        let s = g_i(x, t) * c_inj(x, t);
                        if s != 0.0 {
                            for i in 0..dim_c {
                                b_c[base + i] += w * s * cvals[i];
                            }
                        }
                    }
                }
                if let Some(src) = &problem.transport_source {
                    let s = src(x, t);
                    if s != 0.0 {
                        for i in 0..dim_c {
                            b_c[base + i] += w * s * cvals[i];
                        }
                    }
                }
            }

            // History rhs: the cell mass matrix is det_jac I in the
            // orthonormal basis, weighted by the regional porosity.
            if let Some((combo, inv_dt)) = history_combo {
                let scale = phi * tables.det_jac * inv_dt;
                for i in 0..dim_c {
                    b_c[base + i] += scale * combo[base + i];
                }
            }

            // Facet terms.
            for le in 0..3 {
                let fid = tri.facets[le];
                let facet = &mesh.facets[fid];
                let orient = if tri.facet_oriented[le] { 0 } else { 1 };
                let trace_c = &scs.facet[ci][le][orient];
                let trace_u = &sus.facet[ci][le][orient];
                let len = facet.length;
                let sign = if facet.elems[0] == e { 1.0 } else { -1.0 };
                let n = [sign * facet.normal[0], sign * facet.normal[1]];
                let so = dim_c + le * nb;

                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len;
                    let cvals = &trace_c.vals[q * dim_c..(q + 1) * dim_c];
                    let cgrads = &trace_c.grads[q * dim_c..(q + 1) * dim_c];
                    let uvals = &trace_u.vals[q * dim_u..(q + 1) * dim_u];
                    let evals = &ecs.vals[q * nb..(q + 1) * nb];
                    let u = [dot(ux, uvals), dot(uy, uvals)];
                    let un = u[0] * n[0] + u[1] * n[1];

                    if forms.advection {
                        // + c u.n (w - wbar).
                        for j in 0..dim_c {
                            let col = w * un * cvals[j];
                            for i in 0..dim_c {
                                local.a[i * ntot + j] += col * cvals[i];
                            }
                            for m in 0..nb {
                                local.a[(so + m) * ntot + j] -= col * evals[m];
                            }
                        }
                    }
                    if forms.advection && facet.kind.is_boundary() && !layout.is_fixed[slots[le * nb]] && un > 0.0
                    {
                        // Outflow closure on natural boundaries: the facet
                        // equation must read u.n (cbar - c) + penalty terms,
                        // so that cbar is the interior (upwind) trace and
                        // advective mass leaves freely; the zero-flux
                        // boundary condition constrains the diffusive flux
                        // only. Without this term the equation enforces zero
                        // total flux and contaminant piles up at outflow
                        // walls.
                        for m in 0..nb {
                            for l in 0..nb {
                                local.a[(so + m) * ntot + (so + l)] += w * un * evals[m] * evals[l];
                            }
                        }
                    }
                    if forms.upwind {
                        // Upwind stabilization on the inflow part only:
                        // - u.n (c - cbar)(w - wbar), u.n < 0.
                        if un < 0.0 {
                            for i in 0..dim_c {
                                for j in 0..dim_c {
                                    local.a[i * ntot + j] -= w * un * cvals[i] * cvals[j];
                                }
                                for m in 0..nb {
                                    let v = w * un * cvals[i] * evals[m];
                                    local.a[i * ntot + (so + m)] += v;
                                    local.a[(so + m) * ntot + i] += v;
                                }
                            }
                            for m in 0..nb {
                                for l in 0..nb {
                                    local.a[(so + m) * ntot + (so + l)] -=
                                        w * un * evals[m] * evals[l];
                                }
                            }
                        }
                    }

                    if forms.diffusion {
                        let d = dispersion_tensor(&problem.dispersion, tri.region, u, problem.phi);
                        let dn = [
                            d[0][0] * n[0] + d[0][1] * n[1],
                            d[1][0] * n[0] + d[1][1] * n[1],
                        ];
                        let pen_weight = match problem.penalty_weight {
                            DiffPenaltyWeight::NormalNormal => dn[0] * n[0] + dn[1] * n[1],
                            DiffPenaltyWeight::FluxNorm => dn[0].hypot(dn[1]),
                        };
                        let pen = beta_tr / h_k * pen_weight;
                        for i in 0..dim_c {
                            for j in 0..dim_c {
                                local.a[i * ntot + j] += w * pen * cvals[i] * cvals[j];
                            }
                            for m in 0..nb {
                                let v = w * pen * cvals[i] * evals[m];
                                local.a[i * ntot + (so + m)] -= v;
                                local.a[(so + m) * ntot + i] -= v;
                            }
                        }
                        for m in 0..nb {
                            for l in 0..nb {
                                local.a[(so + m) * ntot + (so + l)] += w * pen * evals[m] * evals[l];
                            }
                        }
                        // Consistency terms with flux (D grad .).n.
                        for j in 0..dim_c {
                            let gj = cgrads[j];
                            let flux_j = dn[0] * gj[0] + dn[1] * gj[1];
                            for i in 0..dim_c {
                                let v = w * flux_j * cvals[i];
                                // -(D grad c).n (w - wbar) and transpose.
                                local.a[i * ntot + j] -= v;
                                local.a[j * ntot + i] -= v;
                            }
                            for m in 0..nb {
                                let v = w * flux_j * evals[m];
                                local.a[(so + m) * ntot + j] += v;
                                local.a[j * ntot + (so + m)] += v;
                            }
                        }
                    }
                }
            }

            // Scatter with constraint elimination.
            let mut a_cc = DMat::zeros(dim_c, dim_c);
            for i in 0..dim_c {
                for j in 0..dim_c {
                    *a_cc.at_mut(i, j) = local.at(i, j);
                }
            }
            let free_slots: Vec<(usize, usize)> = slots
                .iter()
                .enumerate()
                .filter(|(_, &g)| !layout.is_fixed[g])
                .map(|(s, &g)| (s, layout.free_index[g]))
                .collect();
            let nfree = free_slots.len();
            let mut a_cf = DMat::zeros(dim_c, nfree);
            let mut a_fc = DMat::zeros(nfree, dim_c);
            let mut a_ff = DMat::zeros(nfree, nfree);
            for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                for i in 0..dim_c {
                    *a_cf.at_mut(i, jj) = local.at(i, dim_c + s_j);
                }
            }
            for (ii, &(s_i, _)) in free_slots.iter().enumerate() {
                for j in 0..dim_c {
                    *a_fc.at_mut(ii, j) = local.at(dim_c + s_i, j);
                }
                for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                    *a_ff.at_mut(ii, jj) = local.at(dim_c + s_i, dim_c + s_j);
                }
            }
            // Eliminated columns feed the rhs directly (values in `fixed`).
            for (s, &g) in slots.iter().enumerate() {
                if !layout.is_fixed[g] {
                    continue;
                }
                let gv = fixed[g];
                if gv != 0.0 {
                    for i in 0..dim_c {
                        b_c[base + i] -= local.at(i, dim_c + s) * gv;
                    }
                    for &(s_i, free_i) in &free_slots {
                        b_f[free_i] -= local.at(dim_c + s_i, dim_c + s) * gv;
                    }
                }
            }

            matrix.elems.push(ElemMat {
                elem: e,
                fdofs: free_slots.iter().map(|&(_, f)| f).collect(),
                a_cc,
                a_cf,
                a_fc,
                a_ff,
            });
        }

        (matrix, SystemRhs { b_c, b_f })
    }

    /// Solve one implicit transport step; the diffusive-flux boundary
    /// condition is natural unless Dirichlet data is configured. `cache`
    /// carries the factorization
    /// of a previous step's matrix; it is used as a preconditioner with
    /// iterative refinement and refreshed whenever refinement stalls.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_step(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        flow_dofs: &FlowDofs,
        u_flow: &FlowState,
        t: f64,
        dt_coef: f64,
        history_combo: (&[f64], f64),
        condense: bool,
        cache: &mut Option<(Factorized, SystemMatrix)>,
    ) -> Result<ConcState> {
        let fixed = self.fixed_values(mesh, tables, problem, t);
        let (matrix, rhs) = self.assemble(
            mesh,
            tables,
            problem,
            flow_dofs,
            u_flow,
            t,
            dt_coef,
            Some(history_combo),
            &fixed,
            TransportForms::all(),
        );
        let sol = match cache {
            Some((factor, stale)) => {
                match factor.solve_preconditioned(stale, &matrix, &rhs, 1e-11, 3) {
                    Ok(sol) => sol,
                    Err(_) => {
                        let factor = factorize(&matrix, condense)?;
                        let sol = factor.solve(&matrix, &rhs)?;
                        *cache = Some((factor, matrix));
                        sol
                    }
                }
            }
            None => {
                let factor = factorize(&matrix, condense)?;
                let sol = factor.solve(&matrix, &rhs)?;
                *cache = Some((factor, matrix));
                sol
            }
        };
        Ok(self.merge_solution(sol.cell, &sol.facet, &fixed, t))
    }

    pub fn merge_solution(
        &self,
        cell: Vec<f64>,
        free_facet: &[f64],
        fixed: &[f64],
        t: f64,
    ) -> ConcState {
        let mut facet = vec![0.0; self.dofs.n_facet];
        for g in 0..self.dofs.n_facet {
            facet[g] = if self.layout.is_fixed[g] {
                fixed[g]
            } else {
                free_facet[self.layout.free_index[g]]
            };
        }
        ConcState {
            t,
            k: self.dofs.k,
            dim_c: self.dofs.dim_c,
            dim_bar: self.dofs.dim_bar,
            cell,
            facet,
        }
    }

    /// Project initial data onto the cell and trace spaces.
    pub fn project_initial(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        c0: &dyn Fn([f64; 2]) -> f64,
    ) -> ConcState {
        let dofs = &self.dofs;
        let basis = &tables.cell_space(dofs.k).basis;
        let edge_basis = &tables.edge_space(dofs.k).basis;
        let mut state = ConcState::zeros(dofs, 0.0);
        for e in 0..mesh.n_elements() {
            let geom = mesh.element_geometry(e).expect("valid element");
            let coefs = l2_project_element(&|x| c0(x), &geom, basis, &tables.vol_rule);
            state.cell[e * dofs.dim_c..(e + 1) * dofs.dim_c].copy_from_slice(&coefs);
        }
        for fid in 0..mesh.n_facets() {
            let (p0, p1) = mesh.facet_points(fid);
            let coefs = l2_project_facet(&|x| c0(x), p0, p1, edge_basis, &tables.edge_rule);
            let off = dofs.cbar_offset[fid];
            state.facet[off..off + dofs.dim_bar].copy_from_slice(&coefs);
        }
        state
    }
}

/// Which parts of the transport operator to assemble. `upwind` controls the
/// inflow stabilization term of the advective form separately so its
/// dissipation can be isolated.
#[derive(Debug, Clone, Copy)]
pub struct TransportForms {
    pub time: bool,
    pub advection: bool,
    pub upwind: bool,
    pub diffusion: bool,
    pub wells: bool,
}

impl TransportForms {
    pub fn all() -> TransportForms {
        TransportForms { time: true, advection: true, upwind: true, diffusion: true, wells: true }
    }

    pub fn only_advection() -> TransportForms {
        TransportForms { time: false, advection: true, upwind: true, diffusion: false, wells: false }
    }

    pub fn only_diffusion() -> TransportForms {
        TransportForms { time: false, advection: false, upwind: false, diffusion: true, wells: false }
    }
}

/// Gram matrix of the scalar energy seminorm
/// sum_K (||grad w||^2_K + h_K^{-1} ||w - wbar||^2_dK)
/// plus the L2 mass (making it a norm), over (cell c, free cbar).
/// Used by the transport coercivity oracle.
pub fn assemble_cnorm_matrix(
    solver: &TransportSolver,
    mesh: &Mesh,
    tables: &MeshTables,
    with_l2: bool,
) -> SystemMatrix {
    let dofs = &solver.dofs;
    let layout = &solver.layout;
    let scs = tables.cell_space(dofs.k);
    let ecs = tables.edge_space(dofs.k);
    let dim_c = dofs.dim_c;
    let nb = dofs.dim_bar;
    let nq_vol = tables.vol_rule.points.len();
    let nq_edge = tables.edge_rule.points.len();

    let mut matrix = SystemMatrix::new(dofs.n_elems, dim_c, layout.n_free);

    for (e, tri) in mesh.tris.iter().enumerate() {
        let ci = class_index(tri.class);
        let vol = &scs.vol[ci];
        let h_k = mesh.h_k(e);
        let mut slots: Vec<usize> = Vec::with_capacity(3 * nb);
        for le in 0..3 {
            let off = dofs.cbar_offset[tri.facets[le]];
            for i in 0..nb {
                slots.push(off + i);
            }
        }
        let ns = slots.len();
        let ntot = dim_c + ns;
        let mut local = DMat::zeros(ntot, ntot);

        for q in 0..nq_vol {
            let w = vol.weights[q];
            let vals = &vol.vals[q * dim_c..(q + 1) * dim_c];
            let grads = &vol.grads[q * dim_c..(q + 1) * dim_c];
            for i in 0..dim_c {
                for j in 0..dim_c {
                    let mut v = w * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    if with_l2 {
                        v += w * vals[i] * vals[j];
                    }
                    local.a[i * ntot + j] += v;
                }
            }
        }
        for le in 0..3 {
            let fid = tri.facets[le];
            let facet = &mesh.facets[fid];
            let orient = if tri.facet_oriented[le] { 0 } else { 1 };
            let trace = &scs.facet[ci][le][orient];
            let so = dim_c + le * nb;
            for q in 0..nq_edge {
                let w = tables.edge_rule.weights[q] * facet.length / h_k;
                let cvals = &trace.vals[q * dim_c..(q + 1) * dim_c];
                let evals = &ecs.vals[q * nb..(q + 1) * nb];
                for i in 0..dim_c {
                    for j in 0..dim_c {
                        local.a[i * ntot + j] += w * cvals[i] * cvals[j];
                    }
                    for m in 0..nb {
                        let v = w * cvals[i] * evals[m];
                        local.a[i * ntot + (so + m)] -= v;
                        local.a[(so + m) * ntot + i] -= v;
                    }
                }
                for m in 0..nb {
                    for l in 0..nb {
                        local.a[(so + m) * ntot + (so + l)] += w * evals[m] * evals[l];
                    }
                }
            }
        }

        let free_slots: Vec<(usize, usize)> = slots
            .iter()
            .enumerate()
            .filter(|(_, &g)| !layout.is_fixed[g])
            .map(|(s, &g)| (s, layout.free_index[g]))
            .collect();
        let nfree = free_slots.len();
        let mut a_cc = DMat::zeros(dim_c, dim_c);
        for i in 0..dim_c {
            for j in 0..dim_c {
                *a_cc.at_mut(i, j) = local.at(i, j);
            }
        }
        let mut a_cf = DMat::zeros(dim_c, nfree);
        let mut a_fc = DMat::zeros(nfree, dim_c);
        let mut a_ff = DMat::zeros(nfree, nfree);
        for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
            for i in 0..dim_c {
                *a_cf.at_mut(i, jj) = local.at(i, dim_c + s_j);
            }
        }
        for (ii, &(s_i, _)) in free_slots.iter().enumerate() {
            for j in 0..dim_c {
                *a_fc.at_mut(ii, j) = local.at(dim_c + s_i, j);
            }
            for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                *a_ff.at_mut(ii, jj) = local.at(dim_c + s_i, dim_c + s_j);
            }
        }
        matrix.elems.push(ElemMat {
            elem: e,
            fdofs: free_slots.iter().map(|&(_, f)| f).collect(),
            a_cc,
            a_cf,
            a_fc,
            a_ff,
        });
    }
    matrix
}
