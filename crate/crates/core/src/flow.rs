//! Assembly and solution of one implicit Stokes/Darcy step.
//!
//! Unknowns: cell velocity u (vector P_k), cell pressure p (P_{k-1}),
//! velocity trace ubar on facets of the Stokes sub-mesh, pressure traces
//! pbar^s / pbar^d on their sub-meshes (both on the interface), and an
//! optional mean-of-pressure multiplier.
//!
//! The bilinear forms:
//! - Stokes interior-penalty form: 2 mu eps(u):eps(v) volume term, penalty
//!   (2 beta_s mu / h_K)(u - ubar).(v - vbar) and two symmetric consistency
//!   terms -2 mu (eps(.) n).(. - .bar) on element boundaries,
//! - Darcy form: mu(c)/kappa(x) u.v,
//! - interface friction: gamma mu(cbar) (ubar.tau)(vbar.tau) with
//!   gamma = alpha / sqrt(tau . kappa tau),
//! - pressure coupling: -int_K p div v + int_dK pbar^j v.n per sub-mesh and
//!   -int_F pbar^j vbar.n^j on the interface, with the transposed pairings
//!   appearing in the mass rows (the system is symmetric),
//! - time term: the BDF mass contribution on Stokes cells only.
//!
//! Concentration-dependent coefficients are evaluated from the lagged
//! concentration state, pointwise at quadrature nodes.
//!
//! Testing the solved state with piecewise-P_{k-1} functions shows the
//! discrete velocity satisfies -div u_h = Pi_Q (g_p - g_i) per element in
//! the Darcy region (zero in Stokes), u_h.n is continuous across interior
//! facets and matches ubar.n on the interface; `mass_conservation_report`
//! quantifies all of this for runtime checking.

use crate::fem::dense::DMat;
use crate::fem::dofmap::{ConstraintLayout, FlowDofs};
use crate::fem::projection::l2_project_facet;
use crate::fem::tables::{class_index, MeshTables};
use crate::linsys::{factorize, ElemMat, Factorized, Solution, SystemMatrix, SystemRhs};
use crate::mesh::{FacetKind, Mesh, Region};
use crate::problem::{Discretization, FlowBc, MeanConstraint, ProblemConfig};
use crate::transport::ConcState;
use crate::{Error, Result};

/// Coefficient vectors of the flow unknowns at one time level.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    /// Element blocks [u_x modes | u_y modes | p modes] per element.
    pub cell: Vec<f64>,
    /// Facet unknowns (velocity and pressure traces, multiplier), with
    /// strongly imposed values merged in.
    pub facet: Vec<f64>,
}

impl FlowState {
    pub fn zeros(dofs: &FlowDofs, t: f64) -> FlowState {
        FlowState {
            t,
            cell: vec![0.0; dofs.n_cell],
            facet: vec![0.0; dofs.n_facet],
        }
    }

    /// Velocity coefficients (x-modes, y-modes) of element `e`.
    pub fn u_coeffs<'a>(&'a self, dofs: &FlowDofs, e: usize) -> (&'a [f64], &'a [f64]) {
        let base = e * dofs.cell_block;
        (
            &self.cell[base..base + dofs.dim_u],
            &self.cell[base + dofs.dim_u..base + 2 * dofs.dim_u],
        )
    }

    /// Pressure coefficients of element `e`.
    pub fn p_coeffs<'a>(&'a self, dofs: &FlowDofs, e: usize) -> &'a [f64] {
        let base = e * dofs.cell_block + 2 * dofs.dim_u;
        &self.cell[base..base + dofs.dim_p]
    }

    /// Integral of the cell pressure over the domain.
    pub fn pressure_integral(&self, dofs: &FlowDofs, det_jac: f64) -> f64 {
        // Only the constant mode (value sqrt(2)) has nonzero mean.
        let c = det_jac / std::f64::consts::SQRT_2;
        (0..dofs.n_elems).map(|e| c * self.p_coeffs(dofs, e)[0]).sum()
    }
}

/// Which bilinear forms to assemble; unit tests assemble single forms.
#[derive(Debug, Clone, Copy)]
pub struct FormFlags {
    pub time: bool,
    pub ah_s: bool,
    pub ah_d: bool,
    pub ah_i: bool,
    pub bh: bool,
    pub mean_row: bool,
}

impl FormFlags {
    pub fn all() -> FormFlags {
        FormFlags { time: true, ah_s: true, ah_d: true, ah_i: true, bh: true, mean_row: true }
    }

    pub fn none() -> FormFlags {
        FormFlags {
            time: false,
            ah_s: false,
            ah_d: false,
            ah_i: false,
            bh: false,
            mean_row: false,
        }
    }

    pub fn only_ah_s() -> FormFlags {
        FormFlags { ah_s: true, ..FormFlags::none() }
    }

    pub fn only_ah_d() -> FormFlags {
        FormFlags { ah_d: true, ..FormFlags::none() }
    }

    pub fn only_ah_i() -> FormFlags {
        FormFlags { ah_i: true, ..FormFlags::none() }
    }

    pub fn only_bh() -> FormFlags {
        FormFlags { bh: true, ..FormFlags::none() }
    }
}

/// Assembled flow operator with boundary-column records and factorization;
/// reused across steps while coefficients are time-invariant.
pub struct FlowOperator {
    pub matrix: SystemMatrix,
    /// (cell row, fixed facet dof, value): contributions of eliminated
    /// columns, applied to the right-hand side as -value * fixed[dof].
    pub bc_cell: Vec<(usize, usize, f64)>,
    /// (free facet row, fixed facet dof, value).
    pub bc_facet: Vec<(usize, usize, f64)>,
    pub factor: Factorized,
    pub dt_coef: f64,
}

/// The flow discretization on one mesh.
pub struct FlowSolver {
    pub dofs: FlowDofs,
    pub layout: ConstraintLayout,
    pub disc: Discretization,
}

impl FlowSolver {
    pub fn new(mesh: &Mesh, problem: &ProblemConfig, disc: &Discretization) -> Result<FlowSolver> {
        problem.validate()?;
        let dofs = FlowDofs::build(mesh, disc.k_f, problem.mean_constraint.is_active());
        let layout = constraint_layout(mesh, &dofs, problem);
        Ok(FlowSolver { dofs, layout, disc: disc.clone() })
    }

    /// Assemble the system matrix for lagged concentration `c_prev` and BDF
    /// leading coefficient over dt `dt_coef` (zero for a steady solve).
    pub fn assemble_matrix(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        c_prev: Option<&ConcState>,
        dt_coef: f64,
        flags: FormFlags,
    ) -> (SystemMatrix, Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
        let dofs = &self.dofs;
        let layout = &self.layout;
        let k = dofs.k;
        let su = tables.cell_space(k);
        let sp = tables.cell_space(k - 1);
        let sc = c_prev.map(|c| tables.cell_space(c.k));
        let eu = tables.edge_space(k);
        let nb = dofs.dim_bar;
        let dim_u = dofs.dim_u;
        let dim_p = dofs.dim_p;
        let nc = dofs.cell_block;
        let beta_s = self.disc.beta_s;

        let mut matrix = SystemMatrix::new(dofs.n_elems, nc, layout.n_free);
        let mut bc_cell = Vec::new();
        let mut bc_facet = Vec::new();
        let with_border = flags.mean_row && dofs.lambda.is_some();
        let mut border_cell = with_border.then(|| vec![0.0; dofs.n_elems * nc]);

        let nq_vol = tables.vol_rule.points.len();
        let nq_edge = tables.edge_rule.points.len();

        for (e, tri) in mesh.tris.iter().enumerate() {
            let ci = class_index(tri.class);
            let vol = &su.vol[ci];
            let vol_p = &sp.vol[ci];
            let v0 = mesh.vertices[tri.verts[0]];
            let h_k = mesh.h_k(e);

            // Facet slots: velocity traces first, own-region pressure traces,
            // then the multiplier column.
            let mut slots: Vec<usize> = Vec::new();
            let mut ubar_slot = [usize::MAX; 3];
            let mut pbar_slot = [usize::MAX; 3];
            for le in 0..3 {
                let fid = tri.facets[le];
                if let Some(off) = dofs.ubar_offset[fid] {
                    ubar_slot[le] = slots.len();
                    for i in 0..2 * nb {
                        slots.push(off + i);
                    }
                }
            }
            for le in 0..3 {
                let fid = tri.facets[le];
                let off = match tri.region {
                    Region::Stokes => dofs.pbar_s_offset[fid],
                    Region::Darcy => dofs.pbar_d_offset[fid],
                };
                if let Some(off) = off {
                    pbar_slot[le] = slots.len();
                    for i in 0..nb {
                        slots.push(off + i);
                    }
                }
            }
            let ns = slots.len();
            let ntot = nc + ns;
            let mut local = DMat::zeros(ntot, ntot);

            let c_coeffs = c_prev.map(|c| c.c_coeffs(e));

            // Volume terms.
            for q in 0..nq_vol {
                let w = vol.weights[q];
                let x = [v0[0] + vol.offsets[q][0], v0[1] + vol.offsets[q][1]];
                let c_q = match (&c_coeffs, &sc) {
                    (Some(cc), Some(sc)) => dot(cc, &sc.vol[ci].vals[q * sc.dim..(q + 1) * sc.dim]),
                    _ => 0.0,
                };
                let uvals = &vol.vals[q * dim_u..(q + 1) * dim_u];
                let ugrads = &vol.grads[q * dim_u..(q + 1) * dim_u];
                let pvals = &vol_p.vals[q * dim_p..(q + 1) * dim_p];

                match tri.region {
                    Region::Stokes => {
                        if flags.time && dt_coef != 0.0 {
                            for i in 0..dim_u {
                                for j in 0..dim_u {
                                    let m = w * dt_coef * uvals[i] * uvals[j];
                                    local.a[i * ntot + j] += m;
                                    local.a[(dim_u + i) * ntot + (dim_u + j)] += m;
                                }
                            }
                        }
                        if flags.ah_s {
                            let s = 2.0 * problem.mu.eval(c_q) * w;
                            for i in 0..dim_u {
                                let gi = ugrads[i];
                                // Row of the x-component test function:
                                // eps(u):eps(v) pairings (xx) and (yx).
                                let row = &mut local.a[i * ntot..i * ntot + 2 * dim_u];
                                for (j, gj) in ugrads.iter().enumerate() {
                                    row[j] += s * (gj[0] * gi[0] + 0.5 * gj[1] * gi[1]);
                                    row[dim_u + j] += s * 0.5 * gj[0] * gi[1];
                                }
                                // Row of the y-component test function.
                                let base = (dim_u + i) * ntot;
                                let row = &mut local.a[base..base + 2 * dim_u];
                                for (j, gj) in ugrads.iter().enumerate() {
                                    row[j] += s * 0.5 * gj[1] * gi[0];
                                    row[dim_u + j] += s * (gj[1] * gi[1] + 0.5 * gj[0] * gi[0]);
                                }
                            }
                        }
                    }
                    Region::Darcy => {
                        if flags.ah_d {
                            let mu = problem.mu.eval(c_q);
                            let kappa = problem.kappa.eval(x);
                            let kinv = mu / kappa;
                            for i in 0..dim_u {
                                for j in 0..dim_u {
                                    let m = w * kinv * uvals[i] * uvals[j];
                                    local.a[i * ntot + j] += m;
                                    local.a[(dim_u + i) * ntot + (dim_u + j)] += m;
                                }
                            }
                        }
                    }
                }

                if flags.bh {
                    // -int p div v and its transpose.
                    for m in 0..dim_p {
                        let pm = pvals[m];
                        for j in 0..dim_u {
                            let g = ugrads[j];
                            let vx = -w * pm * g[0];
                            let vy = -w * pm * g[1];
                            local.a[j * ntot + (2 * dim_u + m)] += vx;
                            local.a[(dim_u + j) * ntot + (2 * dim_u + m)] += vy;
                            local.a[(2 * dim_u + m) * ntot + j] += vx;
                            local.a[(2 * dim_u + m) * ntot + (dim_u + j)] += vy;
                        }
                    }
                }
            }

            // Multiplier column: int_K psi_m dx couples only the constant
            // pressure mode (basis value sqrt(2) on the reference cell).
            if let Some(bc) = &mut border_cell {
                bc[e * nc + 2 * dim_u] += tables.det_jac / std::f64::consts::SQRT_2;
            }

            // Facet terms.
            for le in 0..3 {
                let fid = tri.facets[le];
                let facet = &mesh.facets[fid];
                let orient = if tri.facet_oriented[le] { 0 } else { 1 };
                let trace = &su.facet[ci][le][orient];
                let trace_c = sc.map(|sc| &sc.facet[ci][le][orient]);
                let len = facet.length;
                // Outward normal of this element on this edge.
                let sign = if facet.elems[0] == e { 1.0 } else { -1.0 };
                let n = [sign * facet.normal[0], sign * facet.normal[1]];
                let has_ubar = ubar_slot[le] != usize::MAX;

                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len;
                    let uvals = &trace.vals[q * dim_u..(q + 1) * dim_u];
                    let ugrads = &trace.grads[q * dim_u..(q + 1) * dim_u];
                    let evals = &eu.vals[q * nb..(q + 1) * nb];
                    let c_q = match (&c_coeffs, &trace_c) {
                        (Some(cc), Some(tc)) => {
                            let sc = sc.unwrap();
                            dot(cc, &tc.vals[q * sc.dim..(q + 1) * sc.dim])
                        }
                        _ => 0.0,
                    };

                    if flags.ah_s && tri.region == Region::Stokes {
                        let mu = problem.mu.eval(c_q);
                        let pen = 2.0 * beta_s * mu / h_k;
                        // Penalty (u - ubar).(v - vbar), componentwise.
                        let wp = w * pen;
                        for comp in 0..2 {
                            let ro = comp * dim_u;
                            for i in 0..dim_u {
                                let wi = wp * uvals[i];
                                let row = &mut local.a[(ro + i) * ntot..(ro + i) * ntot + ntot];
                                for (j, uj) in uvals.iter().enumerate() {
                                    row[ro + j] += wi * uj;
                                }
                                if has_ubar {
                                    let so = nc + ubar_slot[le] + comp * nb;
                                    for (m, em) in evals.iter().enumerate() {
                                        row[so + m] -= wi * em;
                                    }
                                }
                            }
                            if has_ubar {
                                let so = nc + ubar_slot[le] + comp * nb;
                                for m in 0..nb {
                                    let wm = wp * evals[m];
                                    let row = &mut local.a[(so + m) * ntot..(so + m) * ntot + ntot];
                                    for (i, ui) in uvals.iter().enumerate() {
                                        row[ro + i] -= wm * ui;
                                    }
                                    for (l, el) in evals.iter().enumerate() {
                                        row[so + l] += wm * el;
                                    }
                                }
                            }
                        }
                        // Consistency terms: -2 mu (eps(u) n).(v - vbar) and
                        // its transpose. (eps n) for mode (j, comp c):
                        // component a value 0.5 (delta_ac (g.n) + g_a n_c).
                        for j in 0..dim_u {
                            let g = ugrads[j];
                            let gn = g[0] * n[0] + g[1] * n[1];
                            for cmp in 0..2 {
                                let epsn = [
                                    0.5 * (if cmp == 0 { gn } else { 0.0 } + g[0] * n[cmp]),
                                    0.5 * (if cmp == 1 { gn } else { 0.0 } + g[1] * n[cmp]),
                                ];
                                for a in 0..2 {
                                    let coef = 2.0 * mu * w * epsn[a];
                                    // Column: trial mode (j, cmp); rows: test
                                    // (i, a) cell and facet modes.
                                    for i in 0..dim_u {
                                        let v = coef * uvals[i];
                                        // -2 mu (eps(u) n).v
                                        local.a[(a * dim_u + i) * ntot + (cmp * dim_u + j)] -= v;
                                        // transpose (test and trial swapped)
                                        local.a[(cmp * dim_u + j) * ntot + (a * dim_u + i)] -= v;
                                    }
                                    if has_ubar {
                                        let so = nc + ubar_slot[le] + a * nb;
                                        for m in 0..nb {
                                            let v = coef * evals[m];
                                            // +2 mu (eps(u) n).vbar
                                            local.a[(so + m) * ntot + (cmp * dim_u + j)] += v;
                                            local.a[(cmp * dim_u + j) * ntot + (so + m)] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }

                    if flags.bh && pbar_slot[le] != usize::MAX {
                        // + int pbar^j v.n and transpose (mass row).
                        let po = nc + pbar_slot[le];
                        for m in 0..nb {
                            for i in 0..dim_u {
                                let vx = w * evals[m] * uvals[i] * n[0];
                                let vy = w * evals[m] * uvals[i] * n[1];
                                local.a[i * ntot + (po + m)] += vx;
                                local.a[(dim_u + i) * ntot + (po + m)] += vy;
                                local.a[(po + m) * ntot + i] += vx;
                                local.a[(po + m) * ntot + (dim_u + i)] += vy;
                            }
                        }
                    }
                }
            }

            // Scatter the local block, moving fixed columns into boundary
            // records and dropping fixed rows.
            let mut a_cc = DMat::zeros(nc, nc);
            for i in 0..nc {
                for j in 0..nc {
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
            let mut a_cf = DMat::zeros(nc, nfree);
            let mut a_fc = DMat::zeros(nfree, nc);
            let mut a_ff = DMat::zeros(nfree, nfree);
            for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                for i in 0..nc {
                    *a_cf.at_mut(i, jj) = local.at(i, nc + s_j);
                }
            }
            for (ii, &(s_i, _)) in free_slots.iter().enumerate() {
                for j in 0..nc {
                    *a_fc.at_mut(ii, j) = local.at(nc + s_i, j);
                }
                for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                    *a_ff.at_mut(ii, jj) = local.at(nc + s_i, nc + s_j);
                }
            }
            // Fixed columns.
            for (s, &g) in slots.iter().enumerate() {
                if !layout.is_fixed[g] {
                    continue;
                }
                for i in 0..nc {
                    let v = local.at(i, nc + s);
                    if v != 0.0 {
                        bc_cell.push((e * nc + i, g, v));
                    }
                }
                for &(s_i, free_i) in &free_slots {
                    let v = local.at(nc + s_i, nc + s);
                    if v != 0.0 {
                        bc_facet.push((free_i, g, v));
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

        // Interface terms (purely facet-coupled).
        let push_facet =
            |trips: &mut Vec<(usize, usize, f64)>,
             bc: &mut Vec<(usize, usize, f64)>,
             row: usize,
             col: usize,
             val: f64| {
                if val == 0.0 {
                    return;
                }
                if layout.is_fixed[row] {
                    return;
                }
                if layout.is_fixed[col] {
                    bc.push((layout.free_index[row], col, val));
                } else {
                    trips.push((layout.free_index[row], layout.free_index[col], val));
                }
            };

        for &fid in &mesh.interface_facets {
            let facet = &mesh.facets[fid];
            let len = facet.length;
            let n = facet.normal; // outward normal of the Stokes subdomain
            let tau = facet.tangent;
            let ubar_off = dofs.ubar_offset[fid].expect("interface facets carry velocity traces");
            let ps_off = dofs.pbar_s_offset[fid].expect("interface carries pbar_s");
            let pd_off = dofs.pbar_d_offset[fid].expect("interface carries pbar_d");
            let cbar = c_prev.map(|c| c.cbar_coeffs(fid));
            let ec = c_prev.map(|c| tables.edge_space(c.k));

            for q in 0..nq_edge {
                let w = tables.edge_rule.weights[q] * len;
                let evals = &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                let x = mesh.facet_point(fid, tables.edge_rule.points[q]);

                if flags.ah_i {
                    let cbar_q = match (&cbar, &ec) {
                        (Some(cb), Some(ec)) => {
                            dot(cb, &ec.vals[q * ec.dim..(q + 1) * ec.dim])
                        }
                        _ => 0.0,
                    };
                    let mu = problem.mu.eval(cbar_q);
                    let kappa = problem.kappa.eval(x);
                    let gamma = problem.alpha / kappa.sqrt();
                    for a in 0..2 {
                        for ccomp in 0..2 {
                            let coef = w * gamma * mu * tau[a] * tau[ccomp];
                            if coef == 0.0 {
                                continue;
                            }
                            for m in 0..nb {
                                for l in 0..nb {
                                    push_facet(
                                        &mut matrix.facet_triplets,
                                        &mut bc_facet,
                                        ubar_off + a * nb + m,
                                        ubar_off + ccomp * nb + l,
                                        coef * evals[m] * evals[l],
                                    );
                                }
                            }
                        }
                    }
                }

                if flags.bh {
                    // -int pbar^j vbar.n^j with n^s = n, n^d = -n, plus the
                    // transposed mass-row pairings.
                    for (p_off, nsign) in [(ps_off, 1.0), (pd_off, -1.0)] {
                        for a in 0..2 {
                            let coef = -w * nsign * n[a];
                            if coef == 0.0 {
                                continue;
                            }
                            for m in 0..nb {
                                for l in 0..nb {
                                    let v = coef * evals[m] * evals[l];
                                    push_facet(
                                        &mut matrix.facet_triplets,
                                        &mut bc_facet,
                                        ubar_off + a * nb + m,
                                        p_off + l,
                                        v,
                                    );
                                    push_facet(
                                        &mut matrix.facet_triplets,
                                        &mut bc_facet,
                                        p_off + l,
                                        ubar_off + a * nb + m,
                                        v,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }

        // Traction boundaries: the velocity trace stays unknown; couple it
        // with the facet pressure exactly as on the interface (outward
        // normal), closing both facet equations.
        if flags.bh {
            for (fid, facet) in mesh.facets.iter().enumerate() {
                if !facet.kind.is_boundary() {
                    continue;
                }
                if !matches!(problem.bc.flow_bc(facet.kind), FlowBc::Traction(_)) {
                    continue;
                }
                let ubar_off = dofs.ubar_offset[fid].expect("traction facets are Stokes facets");
                let ps_off = dofs.pbar_s_offset[fid].expect("traction facets carry pbar_s");
                let len = facet.length;
                let n = facet.normal;
                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len;
                    let evals = &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                    for a in 0..2 {
                        let coef = -w * n[a];
                        if coef == 0.0 {
                            continue;
                        }
                        for m in 0..nb {
                            for l in 0..nb {
                                let v = coef * evals[m] * evals[l];
                                push_facet(
                                    &mut matrix.facet_triplets,
                                    &mut bc_facet,
                                    ubar_off + a * nb + m,
                                    ps_off + l,
                                    v,
                                );
                                push_facet(
                                    &mut matrix.facet_triplets,
                                    &mut bc_facet,
                                    ps_off + l,
                                    ubar_off + a * nb + m,
                                    v,
                                );
                            }
                        }
                    }
                }
            }
        }

        if let Some(col_cell) = border_cell {
            let lambda = dofs.lambda.expect("border implies a multiplier dof");
            let index = layout.free_index[lambda];
            assert_eq!(index, layout.n_free - 1, "multiplier must be the last facet dof");
            // Deflation pin: the constant mode of some free pressure trace,
            // where the constant-pressure nullvector is nonzero.
            let pin = mesh
                .facets
                .iter()
                .enumerate()
                .find_map(|(fid, _)| {
                    let off = dofs.pbar_s_offset[fid].or(dofs.pbar_d_offset[fid])?;
                    (!layout.is_fixed[off]).then(|| layout.free_index[off])
                })
                .expect("some free pressure-trace dof exists");
            matrix.border = Some(crate::linsys::SystemBorder {
                index,
                pin,
                col_cell,
                col_facet: vec![0.0; index],
            });
        }

        (matrix, bc_cell, bc_facet)
    }

    /// Prescribed facet-dof values at time `t` (zero where free).
    pub fn fixed_values(&self, mesh: &Mesh, tables: &MeshTables, problem: &ProblemConfig, t: f64) -> Vec<f64> {
        let dofs = &self.dofs;
        let mut vals = vec![0.0; dofs.n_facet];
        let edge_basis = &tables.edge_space(dofs.k).basis;
        for (fid, facet) in mesh.facets.iter().enumerate() {
            if !facet.kind.is_boundary() {
                continue;
            }
            let (p0, p1) = mesh.facet_points(fid);
            match problem.bc.flow_bc(facet.kind) {
                FlowBc::VelocityDirichlet(g) => {
                    let off = dofs.ubar_offset[fid].expect("Dirichlet velocity on Stokes facet");
                    for comp in 0..2 {
                        let gc = l2_project_facet(
                            &|x| g(x, t)[comp],
                            p0,
                            p1,
                            edge_basis,
                            &tables.edge_rule,
                        );
                        vals[off + comp * dofs.dim_bar..off + (comp + 1) * dofs.dim_bar]
                            .copy_from_slice(&gc);
                    }
                }
                FlowBc::SlipSymmetry => {
                    // Normal component zero; facets are axis-aligned.
                }
                FlowBc::PressureTrace(g) => {
                    let off = dofs.pbar_d_offset[fid].expect("pressure trace on Darcy facet");
                    let gc = l2_project_facet(&|x| g(x, t), p0, p1, edge_basis, &tables.edge_rule);
                    vals[off..off + dofs.dim_bar].copy_from_slice(&gc);
                }
                FlowBc::NormalFlux(_) | FlowBc::Traction(_) => {}
            }
        }
        vals
    }

    /// Assemble the right-hand side at time `t`.
    ///
    /// `time_rhs`: combined previous velocity (already weighted by the BDF
    /// history coefficients) and 1/dt.
    pub fn assemble_rhs(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        c_prev: Option<&ConcState>,
        t: f64,
        time_rhs: Option<(&[f64], f64)>,
        bc_cell: &[(usize, usize, f64)],
        bc_facet: &[(usize, usize, f64)],
        fixed: &[f64],
    ) -> SystemRhs {
        let dofs = &self.dofs;
        let layout = &self.layout;
        let k = dofs.k;
        let su = tables.cell_space(k);
        let sp = tables.cell_space(k - 1);
        let sc = c_prev.map(|c| tables.cell_space(c.k));
        let dim_u = dofs.dim_u;
        let dim_p = dofs.dim_p;
        let nc = dofs.cell_block;
        let nb = dofs.dim_bar;
        let nq_vol = tables.vol_rule.points.len();
        let nq_edge = tables.edge_rule.points.len();

        let mut b_c = vec![0.0; dofs.n_elems * nc];
        let mut b_f = vec![0.0; layout.n_free];

        for (e, tri) in mesh.tris.iter().enumerate() {
            let ci = class_index(tri.class);
            let vol = &su.vol[ci];
            let vol_p = &sp.vol[ci];
            let v0 = mesh.vertices[tri.verts[0]];
            let base = e * nc;
            let c_coeffs = c_prev.map(|c| c.c_coeffs(e));

            for q in 0..nq_vol {
                let w = vol.weights[q];
                let x = [v0[0] + vol.offsets[q][0], v0[1] + vol.offsets[q][1]];
                let c_q = match (&c_coeffs, &sc) {
                    (Some(cc), Some(sc)) => dot(cc, &sc.vol[ci].vals[q * sc.dim..(q + 1) * sc.dim]),
                    _ => 0.0,
                };
                let uvals = &vol.vals[q * dim_u..(q + 1) * dim_u];
                let pvals = &vol_p.vals[q * dim_p..(q + 1) * dim_p];
                match tri.region {
                    Region::Stokes => {
                        if let Some(f_s) = &problem.f_s {
                            let f = f_s(x, t, c_q);
                            for i in 0..dim_u {
                                b_c[base + i] += w * f[0] * uvals[i];
                                b_c[base + dim_u + i] += w * f[1] * uvals[i];
                            }
                        }
                    }
                    Region::Darcy => {
                        if let Some(f_d) = &problem.f_d {
                            let mu = problem.mu.eval(c_q);
                            let kappa = problem.kappa.eval(x);
                            let kinv = mu / kappa;
                            let f = f_d(x, t, c_q);
                            for i in 0..dim_u {
                                b_c[base + i] += w * kinv * f[0] * uvals[i];
                                b_c[base + dim_u + i] += w * kinv * f[1] * uvals[i];
                            }
                        }
                        // Mass source (g_p - g_i) against the pressure rows.
                        let gp = problem.g_p.as_ref().map_or(0.0, |g| g(x, t));
                        let gi = problem.g_i.as_ref().map_or(0.0, |g| g(x, t));
                        if gp != 0.0 || gi != 0.0 {
                            for m in 0..dim_p {
                                b_c[base + 2 * dim_u + m] += w * (gp - gi) * pvals[m];
                            }
                        }
                    }
                }
            }

            // BDF history: the velocity mass matrix is det_jac times the
            // identity in the orthonormal basis.
            if let Some((combo, inv_dt)) = time_rhs {
                if tri.region == Region::Stokes {
                    let scale = tables.det_jac * inv_dt;
                    for i in 0..2 * dim_u {
                        b_c[base + i] += scale * combo[base + i];
                    }
                }
            }
        }

        // Boundary data on the facet pressure rows (prescribed u.n) and
        // traction data on the velocity-trace rows.
        for (fid, facet) in mesh.facets.iter().enumerate() {
            if !facet.kind.is_boundary() {
                continue;
            }
            let len = facet.length;
            let n = facet.normal;
            match problem.bc.flow_bc(facet.kind) {
                FlowBc::VelocityDirichlet(g) => {
                    let off = match facet.kind.in_f_s() {
                        true => dofs.pbar_s_offset[fid].unwrap(),
                        false => dofs.pbar_d_offset[fid].unwrap(),
                    };
                    for q in 0..nq_edge {
                        let w = tables.edge_rule.weights[q] * len;
                        let x = mesh.facet_point(fid, tables.edge_rule.points[q]);
                        let evals =
                            &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                        let gv = g(x, t);
                        let gn = gv[0] * n[0] + gv[1] * n[1];
                        for m in 0..nb {
                            let row = off + m;
                            if !layout.is_fixed[row] {
                                b_f[layout.free_index[row]] += w * gn * evals[m];
                            }
                        }
                    }
                }
                FlowBc::NormalFlux(g) => {
                    let off = match facet.kind.in_f_s() {
                        true => dofs.pbar_s_offset[fid].unwrap(),
                        false => dofs.pbar_d_offset[fid].unwrap(),
                    };
                    for q in 0..nq_edge {
                        let w = tables.edge_rule.weights[q] * len;
                        let x = mesh.facet_point(fid, tables.edge_rule.points[q]);
                        let evals = &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                        let gn = g(x, t);
                        for m in 0..nb {
                            let row = off + m;
                            if !layout.is_fixed[row] {
                                b_f[layout.free_index[row]] += w * gn * evals[m];
                            }
                        }
                    }
                }
                FlowBc::Traction(tn) => {
                    let off = dofs.ubar_offset[fid].unwrap();
                    for q in 0..nq_edge {
                        let w = tables.edge_rule.weights[q] * len;
                        let x = mesh.facet_point(fid, tables.edge_rule.points[q]);
                        let evals =
                            &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                        let tv = tn(x, t);
                        for comp in 0..2 {
                            for m in 0..nb {
                                let row = off + comp * nb + m;
                                if !layout.is_fixed[row] {
                                    b_f[layout.free_index[row]] -= w * tv[comp] * evals[m];
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }

        // Mean-constraint target.
        if let (Some(lambda), MeanConstraint::Target(target)) =
            (dofs.lambda, &problem.mean_constraint)
        {
            b_f[layout.free_index[lambda]] += target(t);
        }

        // Eliminated columns.
        for &(row, g, v) in bc_cell {
            b_c[row] -= v * fixed[g];
        }
        for &(row, g, v) in bc_facet {
            b_f[row] -= v * fixed[g];
        }

        SystemRhs { b_c, b_f }
    }

    /// Build (or rebuild) the operator for the given lagged concentration
    /// and BDF coefficient.
    pub fn build_operator(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        c_prev: Option<&ConcState>,
        dt_coef: f64,
    ) -> Result<FlowOperator> {
        let (matrix, bc_cell, bc_facet) =
            self.assemble_matrix(mesh, tables, problem, c_prev, dt_coef, FormFlags::all());
        let factor = factorize(&matrix, self.disc.condense).map_err(|e| match e {
            Error::Solver(msg) => Error::Solver(format!(
                "{msg}; the Stokes penalty may be too small (beta_s = {}), or the mesh invalid",
                self.disc.beta_s
            )),
            other => other,
        })?;
        Ok(FlowOperator { matrix, bc_cell, bc_facet, factor, dt_coef })
    }

    /// Solve one implicit flow step with the given operator.
    pub fn solve_with_operator(
        &self,
        mesh: &Mesh,
        tables: &MeshTables,
        problem: &ProblemConfig,
        op: &FlowOperator,
        c_prev: Option<&ConcState>,
        t: f64,
        time_rhs: Option<(&[f64], f64)>,
    ) -> Result<FlowState> {
        let fixed = self.fixed_values(mesh, tables, problem, t);
        let rhs = self.assemble_rhs(
            mesh, tables, problem, c_prev, t, time_rhs, &op.bc_cell, &op.bc_facet, &fixed,
        );
        let sol = op.factor.solve(&op.matrix, &rhs)?;
        Ok(self.merge_solution(sol, &fixed, t))
    }

    /// Merge solver output and prescribed values into a full state.
    pub fn merge_solution(&self, sol: Solution, fixed: &[f64], t: f64) -> FlowState {
        let layout = &self.layout;
        let mut facet = vec![0.0; self.dofs.n_facet];
        for g in 0..self.dofs.n_facet {
            facet[g] = if layout.is_fixed[g] {
                fixed[g]
            } else {
                sol.facet[layout.free_index[g]]
            };
        }
        FlowState { t, cell: sol.cell, facet }
    }
}

/// Constraint structure induced by the boundary conditions.
fn constraint_layout(mesh: &Mesh, dofs: &FlowDofs, problem: &ProblemConfig) -> ConstraintLayout {
    let mut is_fixed = vec![false; dofs.n_facet];
    for (fid, facet) in mesh.facets.iter().enumerate() {
        if !facet.kind.is_boundary() {
            continue;
        }
        match problem.bc.flow_bc(facet.kind) {
            FlowBc::VelocityDirichlet(_) => {
                let off = dofs.ubar_offset[fid].expect("velocity Dirichlet on Stokes facet");
                for i in 0..2 * dofs.dim_bar {
                    is_fixed[off + i] = true;
                }
            }
            FlowBc::SlipSymmetry => {
                let off = dofs.ubar_offset[fid].expect("slip condition on Stokes facet");
                let n = facet.normal;
                assert!(
                    (n[0].abs() - 1.0).abs() < 1e-12 || (n[1].abs() - 1.0).abs() < 1e-12,
                    "slip condition requires axis-aligned facets"
                );
                let comp = if n[0].abs() > 0.5 { 0 } else { 1 };
                for i in 0..dofs.dim_bar {
                    is_fixed[off + comp * dofs.dim_bar + i] = true;
                }
            }
            FlowBc::PressureTrace(_) => {
                let off = dofs.pbar_d_offset[fid].expect("pressure trace on Darcy facet");
                for i in 0..dofs.dim_bar {
                    is_fixed[off + i] = true;
                }
            }
            FlowBc::NormalFlux(_) | FlowBc::Traction(_) => {}
        }
    }
    ConstraintLayout::new(is_fixed)
}

/// Per-step mass-conservation diagnostics.
#[derive(Debug, Clone)]
pub struct ConservationReport {
    /// L2 norm of div u_h over the Stokes region.
    pub l2_div_s: f64,
    /// max_K || div u_h ||_K over Stokes elements.
    pub max_div_s: f64,
    /// max_K || div u_h + Pi_Q (g_p - g_i) ||_K over Darcy elements.
    pub max_div_residual_d: f64,
    /// max(1, || Pi_Q (g_p - g_i) ||_{Omega^d}): scale for the Darcy residual.
    pub data_scale_d: f64,
    /// max_F int_F [u_h.n]^2 over interior facets, plus boundary facets with
    /// prescribed normal data measured against that data.
    pub max_jump_noninterface: f64,
    /// max over interface facets and sides of int_F ((u^j - ubar).n)^2.
    pub max_jump_interface: f64,
    /// max(1, max_F int_F (u_h.n)^2): scale for the jump integrals.
    pub jump_scale: f64,
}

/// Quantify the divergence and normal-continuity properties of a solved
/// state at time `t`.
pub fn mass_conservation_report(
    mesh: &Mesh,
    tables: &MeshTables,
    dofs: &FlowDofs,
    problem: &ProblemConfig,
    state: &FlowState,
    t: f64,
) -> ConservationReport {
    let k = dofs.k;
    let su = tables.cell_space(k);
    let sp = tables.cell_space(k - 1);
    let dim_u = dofs.dim_u;
    let dim_p = dofs.dim_p;
    let nq_vol = tables.vol_rule.points.len();
    let nq_edge = tables.edge_rule.points.len();

    let mut l2_div_s2 = 0.0;
    let mut max_div_s = 0.0f64;
    let mut max_div_d = 0.0f64;
    let mut data_scale2 = 0.0;

    for (e, tri) in mesh.tris.iter().enumerate() {
        let ci = class_index(tri.class);
        let vol = &su.vol[ci];
        let vol_p = &sp.vol[ci];
        let v0 = mesh.vertices[tri.verts[0]];
        let (ux, uy) = state.u_coeffs(dofs, e);

        // Project g_p - g_i onto P_{k-1}(K) by quadrature.
        let mut g_coefs = vec![0.0; dim_p];
        if tri.region == Region::Darcy {
            for q in 0..nq_vol {
                let wref = tables.vol_rule.weights[q];
                let x = [v0[0] + vol.offsets[q][0], v0[1] + vol.offsets[q][1]];
                let gp = problem.g_p.as_ref().map_or(0.0, |g| g(x, t));
                let gi = problem.g_i.as_ref().map_or(0.0, |g| g(x, t));
                let pv = &vol_p.vals[q * dim_p..(q + 1) * dim_p];
                for m in 0..dim_p {
                    g_coefs[m] += wref * (gp - gi) * pv[m];
                }
            }
        }

        let mut int_res2 = 0.0;
        let mut int_g2 = 0.0;
        for q in 0..nq_vol {
            let w = vol.weights[q];
            let grads = &vol.grads[q * dim_u..(q + 1) * dim_u];
            let mut div = 0.0;
            for i in 0..dim_u {
                div += ux[i] * grads[i][0] + uy[i] * grads[i][1];
            }
            match tri.region {
                Region::Stokes => {
                    int_res2 += w * div * div;
                }
                Region::Darcy => {
                    let pv = &vol_p.vals[q * dim_p..(q + 1) * dim_p];
                    let g = dot(&g_coefs, pv);
                    int_res2 += w * (div + g) * (div + g);
                    int_g2 += w * g * g;
                }
            }
        }
        match tri.region {
            Region::Stokes => {
                l2_div_s2 += int_res2;
                max_div_s = max_div_s.max(int_res2.sqrt());
            }
            Region::Darcy => {
                max_div_d = max_div_d.max(int_res2.sqrt());
                data_scale2 += int_g2;
            }
        }
    }

    let mut max_jump_ni = 0.0f64;
    let mut max_jump_if = 0.0f64;
    let mut un_scale = 0.0f64;
    let eu = tables.edge_space(k);
    let nb = dofs.dim_bar;
    for (fid, facet) in mesh.facets.iter().enumerate() {
        let len = facet.length;
        let n = facet.normal;
        // Normal trace per side at the edge quadrature points.
        let mut side_un = [vec![0.0; nq_edge], vec![0.0; nq_edge]];
        let mut n_sides = 0;
        for side in 0..2 {
            let e = facet.elems[side];
            if e == usize::MAX {
                continue;
            }
            n_sides += 1;
            let tri = &mesh.tris[e];
            let le = facet.local_edge[side];
            let orient = if tri.facet_oriented[le] { 0 } else { 1 };
            let trace = &su.facet[class_index(tri.class)][le][orient];
            let (ux, uy) = state.u_coeffs(dofs, e);
            for q in 0..nq_edge {
                let vals = &trace.vals[q * dim_u..(q + 1) * dim_u];
                let uxv = dot(ux, vals);
                let uyv = dot(uy, vals);
                side_un[side][q] = uxv * n[0] + uyv * n[1];
            }
        }
        let mut scale_q = 0.0;
        for q in 0..nq_edge {
            let w = tables.edge_rule.weights[q] * len;
            scale_q += w * side_un[0][q] * side_un[0][q];
        }
        un_scale = un_scale.max(scale_q);

        if facet.kind == FacetKind::Interface {
            // (u^j - ubar).n on both sides.
            let off = dofs.ubar_offset[fid].unwrap();
            for side in 0..2 {
                let mut jump2 = 0.0;
                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len;
                    let evals = &eu.vals[q * nb..(q + 1) * nb];
                    let ubx = dot(&state.facet[off..off + nb], evals);
                    let uby = dot(&state.facet[off + nb..off + 2 * nb], evals);
                    let ubn = ubx * n[0] + uby * n[1];
                    let d = side_un[side][q] - ubn;
                    jump2 += w * d * d;
                }
                max_jump_if = max_jump_if.max(jump2);
            }
        } else if n_sides == 2 {
            let mut jump2 = 0.0;
            for q in 0..nq_edge {
                let w = tables.edge_rule.weights[q] * len;
                let d = side_un[0][q] - side_un[1][q];
                jump2 += w * d * d;
            }
            max_jump_ni = max_jump_ni.max(jump2);
        } else {
            // Boundary facet with prescribed normal data: the facet pressure
            // rows enforce u_h.n = (facet projection of the data), so the
            // residual is measured against that projection.
            let data: Option<Box<dyn Fn([f64; 2]) -> f64>> =
                match problem.bc.flow_bc(facet.kind) {
                    FlowBc::VelocityDirichlet(g) => {
                        let g = g.clone();
                        Some(Box::new(move |x| {
                            let v = g(x, t);
                            v[0] * n[0] + v[1] * n[1]
                        }))
                    }
                    FlowBc::NormalFlux(g) => {
                        let g = g.clone();
                        Some(Box::new(move |x| g(x, t)))
                    }
                    FlowBc::SlipSymmetry => Some(Box::new(|_| 0.0)),
                    FlowBc::Traction(_) | FlowBc::PressureTrace(_) => None,
                };
            if let Some(gn) = data {
                let (p0, p1) = mesh.facet_points(fid);
                let gn_coefs = l2_project_facet(
                    &|x| gn(x),
                    p0,
                    p1,
                    &eu.basis,
                    &tables.edge_rule,
                );
                let mut jump2 = 0.0;
                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len;
                    let evals = &eu.vals[q * nb..(q + 1) * nb];
                    let d = side_un[0][q] - dot(&gn_coefs, evals);
                    jump2 += w * d * d;
                }
                max_jump_ni = max_jump_ni.max(jump2);
            }
        }
    }

    ConservationReport {
        l2_div_s: l2_div_s2.sqrt(),
        max_div_s,
        max_div_residual_d: max_div_d,
        data_scale_d: data_scale2.sqrt().max(1.0),
        max_jump_noninterface: max_jump_ni,
        max_jump_interface: max_jump_if,
        jump_scale: un_scale.max(1.0),
    }
}

/// Gram matrix of the velocity energy norm on (cell u, free ubar):
/// sum_{K in T^s} (||grad v||^2_K + h_K^{-1} ||v - vbar||^2_dK)
/// + ||v||^2_{Omega^d} + sum gamma ||vbar.tau||^2_{Gamma^I},
/// in the same block layout as the flow system (pressure rows zero).
/// Used by the coercivity oracles.
pub fn assemble_vnorm_matrix(
    solver: &FlowSolver,
    mesh: &Mesh,
    tables: &MeshTables,
    problem: &ProblemConfig,
) -> SystemMatrix {
    let dofs = &solver.dofs;
    let layout = &solver.layout;
    let k = dofs.k;
    let su = tables.cell_space(k);
    let dim_u = dofs.dim_u;
    let nc = dofs.cell_block;
    let nb = dofs.dim_bar;
    let nq_vol = tables.vol_rule.points.len();
    let nq_edge = tables.edge_rule.points.len();

    let mut matrix = SystemMatrix::new(dofs.n_elems, nc, layout.n_free);

    for (e, tri) in mesh.tris.iter().enumerate() {
        let ci = class_index(tri.class);
        let vol = &su.vol[ci];
        let h_k = mesh.h_k(e);

        let mut slots: Vec<usize> = Vec::new();
        let mut ubar_slot = [usize::MAX; 3];
        for le in 0..3 {
            let fid = tri.facets[le];
            if let Some(off) = dofs.ubar_offset[fid] {
                ubar_slot[le] = slots.len();
                for i in 0..2 * nb {
                    slots.push(off + i);
                }
            }
        }
        let ns = slots.len();
        let ntot = nc + ns;
        let mut local = DMat::zeros(ntot, ntot);

        for q in 0..nq_vol {
            let w = vol.weights[q];
            let uvals = &vol.vals[q * dim_u..(q + 1) * dim_u];
            let ugrads = &vol.grads[q * dim_u..(q + 1) * dim_u];
            match tri.region {
                Region::Stokes => {
                    for i in 0..dim_u {
                        for j in 0..dim_u {
                            let g = w * (ugrads[i][0] * ugrads[j][0] + ugrads[i][1] * ugrads[j][1]);
                            local.a[i * ntot + j] += g;
                            local.a[(dim_u + i) * ntot + (dim_u + j)] += g;
                        }
                    }
                }
                Region::Darcy => {
                    for i in 0..dim_u {
                        for j in 0..dim_u {
                            let m = w * uvals[i] * uvals[j];
                            local.a[i * ntot + j] += m;
                            local.a[(dim_u + i) * ntot + (dim_u + j)] += m;
                        }
                    }
                }
            }
        }

        if tri.region == Region::Stokes {
            for le in 0..3 {
                let fid = tri.facets[le];
                let facet = &mesh.facets[fid];
                let orient = if tri.facet_oriented[le] { 0 } else { 1 };
                let trace = &su.facet[ci][le][orient];
                let len = facet.length;
                let has_ubar = ubar_slot[le] != usize::MAX;
                for q in 0..nq_edge {
                    let w = tables.edge_rule.weights[q] * len / h_k;
                    let uvals = &trace.vals[q * dim_u..(q + 1) * dim_u];
                    let evals = &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
                    for comp in 0..2 {
                        let ro = comp * dim_u;
                        for i in 0..dim_u {
                            for j in 0..dim_u {
                                local.a[(ro + i) * ntot + (ro + j)] += w * uvals[i] * uvals[j];
                            }
                        }
                        if has_ubar {
                            let so = nc + ubar_slot[le] + comp * nb;
                            for i in 0..dim_u {
                                for m in 0..nb {
                                    let v = w * uvals[i] * evals[m];
                                    local.a[(ro + i) * ntot + (so + m)] -= v;
                                    local.a[(so + m) * ntot + (ro + i)] -= v;
                                }
                            }
                            for m in 0..nb {
                                for l in 0..nb {
                                    local.a[(so + m) * ntot + (so + l)] += w * evals[m] * evals[l];
                                }
                            }
                        }
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
        let mut a_cc = DMat::zeros(nc, nc);
        for i in 0..nc {
            for j in 0..nc {
                *a_cc.at_mut(i, j) = local.at(i, j);
            }
        }
        let mut a_cf = DMat::zeros(nc, nfree);
        let mut a_fc = DMat::zeros(nfree, nc);
        let mut a_ff = DMat::zeros(nfree, nfree);
        for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
            for i in 0..nc {
                *a_cf.at_mut(i, jj) = local.at(i, nc + s_j);
            }
        }
        for (ii, &(s_i, _)) in free_slots.iter().enumerate() {
            for j in 0..nc {
                *a_fc.at_mut(ii, j) = local.at(nc + s_i, j);
            }
            for (jj, &(s_j, _)) in free_slots.iter().enumerate() {
                *a_ff.at_mut(ii, jj) = local.at(nc + s_i, nc + s_j);
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

    // Interface tangential term.
    let nb = dofs.dim_bar;
    for &fid in &mesh.interface_facets {
        let facet = &mesh.facets[fid];
        let len = facet.length;
        let tau = facet.tangent;
        let off = dofs.ubar_offset[fid].unwrap();
        for q in 0..tables.edge_rule.points.len() {
            let w = tables.edge_rule.weights[q] * len;
            let x = mesh.facet_point(fid, tables.edge_rule.points[q]);
            let gamma = problem.alpha / problem.kappa.eval(x).sqrt();
            let evals = &tables.edge_space(k).vals[q * nb..(q + 1) * nb];
            for a in 0..2 {
                for c in 0..2 {
                    let coef = w * gamma * tau[a] * tau[c];
                    if coef == 0.0 {
                        continue;
                    }
                    for m in 0..nb {
                        for l in 0..nb {
                            let row = off + a * nb + m;
                            let col = off + c * nb + l;
                            if !layout.is_fixed[row] && !layout.is_fixed[col] {
                                matrix.facet_triplets.push((
                                    layout.free_index[row],
                                    layout.free_index[col],
                                    coef * evals[m] * evals[l],
                                ));
                            }
                        }
                    }
                }
            }
        }
    }

    matrix
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
