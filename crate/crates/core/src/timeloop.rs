//! Sequential time stepping: one implicit flow solve followed by one
//! implicit transport solve per step, lagging the concentration in every
//! concentration-dependent flow coefficient and using the fresh velocity in
//! the transport forms.
//!
//! Supported schemes: backward Euler, and third-order backward
//! differentiation with BDF1/BDF2 startup for the first two steps. The BDF
//! weights touch only the velocity mass term (Stokes cells) and the
//! porosity-weighted concentration mass term; all spatial forms are
//! unchanged across schemes. Under BDF3 the concentration lag stays one
//! level (no extrapolation).

use crate::fem::projection::{bdm_interpolate, interpolate_vbar};
use crate::fem::tables::MeshTables;
use crate::flow::{mass_conservation_report, ConservationReport, FlowOperator, FlowSolver, FlowState};
use crate::linsys::{factorize, Factorized, SystemMatrix};
use crate::mesh::Mesh;
use crate::problem::{Discretization, ProblemConfig};
use crate::transport::{ConcState, TransportSolver};
use crate::{Error, Result};

/// Time integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    /// Backward Euler (the analyzed first-order scheme).
    BE,
    /// BDF3 with BDF1/BDF2 startup (the experiments' scheme).
    Bdf3,
}

/// Uniform time grid.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub dt: f64,
    pub t_end: f64,
    pub n_steps: usize,
    /// True when T/dt was not an integer and the step count was rounded.
    pub rounded: bool,
}

impl TimeGrid {
    pub fn new(dt: f64, t_end: f64) -> Result<TimeGrid> {
        if dt <= 0.0 || t_end < 0.0 {
            return Err(Error::Config(format!(
                "time grid requires dt > 0 and T >= 0, got dt = {dt}, T = {t_end}"
            )));
        }
        let raw = t_end / dt;
        let n_steps = raw.round() as usize;
        let rounded = (raw - n_steps as f64).abs() > 1e-9 * raw.max(1.0);
        Ok(TimeGrid { dt, t_end, n_steps, rounded })
    }
}

/// BDF weights for step `n` (1-based): leading coefficient and the weights
/// of u^{n-1}, u^{n-2}, ... on the right-hand side, so that the time term is
/// (w0 u^n - sum_i w_i u^{n-i}) / dt.
pub fn bdf_weights(scheme: TimeScheme, step: usize) -> (f64, Vec<f64>) {
    let order = match scheme {
        TimeScheme::BE => 1,
        TimeScheme::Bdf3 => step.min(3),
    };
    match order {
        1 => (1.0, vec![1.0]),
        2 => (1.5, vec![2.0, -0.5]),
        _ => (11.0 / 6.0, vec![3.0, -1.5, 1.0 / 3.0]),
    }
}

/// Per-step summary.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub t: f64,
    pub conservation: Option<ConservationReport>,
}

/// The coupled simulation state and drivers.
pub struct Simulation {
    pub mesh: Mesh,
    pub tables: MeshTables,
    pub problem: ProblemConfig,
    pub disc: Discretization,
    pub scheme: TimeScheme,
    pub grid: TimeGrid,
    pub flow: FlowSolver,
    pub transport: TransportSolver,
    /// Newest first; at most 3 levels retained.
    flow_hist: Vec<FlowState>,
    conc_hist: Vec<ConcState>,
    step: usize,
    /// Operator cache for the constant-coefficient fast path.
    flow_op: Option<FlowOperator>,
    /// Stale-factorization cache for the concentration-dependent path.
    flow_factor: Option<(Factorized, SystemMatrix, f64)>,
    transport_factor: Option<(Factorized, SystemMatrix)>,
    /// Compute a conservation report every step.
    pub conservation_check: bool,
}

impl Simulation {
    /// Build the simulation and project the initial data: the velocity by
    /// the element-moment interpolation (divergence-free data stays exactly
    /// divergence-free), the concentration by L2 projection of cell and
    /// trace values.
    pub fn new(
        mesh: Mesh,
        problem: ProblemConfig,
        disc: Discretization,
        scheme: TimeScheme,
        grid: TimeGrid,
    ) -> Result<Simulation> {
        problem.validate()?;
        let quad_degree = disc.flow_quad_degree().max(disc.transport_quad_degree());
        let tables = MeshTables::build(
            &mesh,
            &[disc.k_f, disc.k_f - 1, disc.k_c],
            &[disc.k_f, disc.k_c],
            quad_degree,
        )?;
        let flow = FlowSolver::new(&mesh, &problem, &disc)?;
        let transport = TransportSolver::new(&mesh, &problem, &disc);

        // Initial states.
        let u0 = problem.u0.clone();
        let cell_interp =
            bdm_interpolate(&|x| u0(x), &mesh, disc.k_f, &tables.vol_rule, &tables.edge_rule)?;
        let vbar = interpolate_vbar(&|x| u0(x), &cell_interp, &mesh, disc.k_f, &tables.edge_rule);
        let mut flow0 = FlowState::zeros(&flow.dofs, 0.0);
        for (e, coefs) in cell_interp.iter().enumerate() {
            let base = e * flow.dofs.cell_block;
            flow0.cell[base..base + 2 * flow.dofs.dim_u].copy_from_slice(coefs);
        }
        for (fid, coefs) in vbar.iter().enumerate() {
            if let (Some(coefs), Some(off)) = (coefs, flow.dofs.ubar_offset[fid]) {
                flow0.facet[off..off + 2 * flow.dofs.dim_bar].copy_from_slice(coefs);
            }
        }
        let c0 = problem.c0.clone();
        let conc0 = transport.project_initial(&mesh, &tables, &|x| c0(x));

        let sim = Simulation {
            mesh,
            tables,
            problem,
            disc,
            scheme,
            grid,
            flow,
            transport,
            flow_hist: vec![flow0],
            conc_hist: vec![conc0],
            step: 0,
            flow_op: None,
            flow_factor: None,
            transport_factor: None,
            conservation_check: false,
        };
        sim.warn_dt_bound();
        Ok(sim)
    }

    /// Solvability of the transport step needs dt below 1/d_n with
    /// d_n ~ (1 + max |g_i - g_p|)/phi; warn when violated (the shipped
    /// scenarios sit orders of magnitude below).
    fn warn_dt_bound(&self) {
        let mut g_max = 0.0f64;
        for e in 0..self.mesh.n_elements() {
            let g = self.mesh.element_geometry(e).expect("valid element");
            let x = [
                (g.coords[0][0] + g.coords[1][0] + g.coords[2][0]) / 3.0,
                (g.coords[0][1] + g.coords[1][1] + g.coords[2][1]) / 3.0,
            ];
            let gi = self.problem.g_i.as_ref().map_or(0.0, |f| f(x, 0.0));
            let gp = self.problem.g_p.as_ref().map_or(0.0, |f| f(x, 0.0));
            g_max = g_max.max((gi - gp).abs());
        }
        let d_n = (1.0 + g_max) / self.problem.phi.min(1.0);
        if d_n * self.grid.dt >= 1.0 {
            eprintln!(
                "warning: dt = {} may be too large for transport solvability (d_n dt = {:.3})",
                self.grid.dt,
                d_n * self.grid.dt
            );
        }
    }

    pub fn current_flow(&self) -> &FlowState {
        &self.flow_hist[0]
    }

    pub fn current_conc(&self) -> &ConcState {
        &self.conc_hist[0]
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.grid.dt
    }

    /// Advance one step: flow with the lagged concentration, then transport
    /// with the fresh velocity.
    pub fn advance(&mut self) -> Result<StepReport> {
        self.step += 1;
        let t = self.step as f64 * self.grid.dt;
        let dt = self.grid.dt;
        let (w0, rhs_w) = bdf_weights(self.scheme, self.step);
        let dt_coef = w0 / dt;

        let c_prev = &self.conc_hist[0];

        // Weighted history for the velocity time term.
        let n_cell_f = self.flow.dofs.n_cell;
        let mut combo = vec![0.0; n_cell_f];
        for (i, w) in rhs_w.iter().enumerate() {
            debug_assert!(i < self.flow_hist.len(), "insufficient flow history");
            let state = &self.flow_hist[i.min(self.flow_hist.len() - 1)];
            for (c, s) in combo.iter_mut().zip(&state.cell) {
                *c += w * s;
            }
        }

        let flow_state = if self.problem.mu.is_constant() {
            // Constant coefficients: the operator is time invariant per BDF
            // coefficient; reuse matrix, boundary columns and factorization.
            let rebuild = match &self.flow_op {
                None => true,
                Some(op) => op.dt_coef != dt_coef,
            };
            if rebuild {
                self.flow_op = Some(
                    self.flow
                        .build_operator(&self.mesh, &self.tables, &self.problem, Some(c_prev), dt_coef)
                        .map_err(|e| Error::Solver(format!("step {}: {e}", self.step)))?,
                );
            }
            let op = self.flow_op.as_ref().unwrap();
            self.flow
                .solve_with_operator(
                    &self.mesh,
                    &self.tables,
                    &self.problem,
                    op,
                    Some(c_prev),
                    t,
                    Some((&combo, 1.0 / dt)),
                )
                .map_err(|e| Error::Solver(format!("flow step {}: {e}", self.step)))?
        } else {
            // Concentration-dependent coefficients: assemble the current
            // operator, and solve through the cached factorization of a
            // recent step (iterative refinement), refreshing it on demand.
            let (matrix, bc_cell, bc_facet) = self.flow.assemble_matrix(
                &self.mesh,
                &self.tables,
                &self.problem,
                Some(c_prev),
                dt_coef,
                crate::flow::FormFlags::all(),
            );
            let fixed = self.flow.fixed_values(&self.mesh, &self.tables, &self.problem, t);
            let rhs = self.flow.assemble_rhs(
                &self.mesh,
                &self.tables,
                &self.problem,
                Some(c_prev),
                t,
                Some((&combo, 1.0 / dt)),
                &bc_cell,
                &bc_facet,
                &fixed,
            );
            let reusable = matches!(&self.flow_factor, Some((_, _, dtc)) if *dtc == dt_coef);
            let sol = if reusable {
                let (factor, stale, _) = self.flow_factor.as_ref().unwrap();
                factor.solve_preconditioned(stale, &matrix, &rhs, 1e-11, 3).ok()
            } else {
                None
            };
            let sol = match sol {
                Some(sol) => sol,
                None => {
                    let factor = factorize(&matrix, self.disc.condense)
                        .map_err(|e| Error::Solver(format!("flow step {}: {e}", self.step)))?;
                    let sol = factor
                        .solve(&matrix, &rhs)
                        .map_err(|e| Error::Solver(format!("flow step {}: {e}", self.step)))?;
                    self.flow_factor = Some((factor, matrix, dt_coef));
                    sol
                }
            };
            self.flow.merge_solution(sol, &fixed, t)
        };

        // Weighted history for the concentration time term.
        let n_cell_c = self.transport.dofs.n_cell;
        let mut c_combo = vec![0.0; n_cell_c];
        for (i, w) in rhs_w.iter().enumerate() {
            let state = &self.conc_hist[i.min(self.conc_hist.len() - 1)];
            for (c, s) in c_combo.iter_mut().zip(&state.cell) {
                *c += w * s;
            }
        }
        let mut transport_cache = self.transport_factor.take();
        let conc_state = self
            .transport
            .solve_step(
                &self.mesh,
                &self.tables,
                &self.problem,
                &self.flow.dofs,
                &flow_state,
                t,
                dt_coef,
                (&c_combo, 1.0 / dt),
                self.disc.condense,
                &mut transport_cache,
            )
            .map_err(|e| Error::Solver(format!("transport step {}: {e}", self.step)))?;
        self.transport_factor = transport_cache;

        let conservation = self.conservation_check.then(|| {
            mass_conservation_report(
                &self.mesh,
                &self.tables,
                &self.flow.dofs,
                &self.problem,
                &flow_state,
                t,
            )
        });

        self.flow_hist.insert(0, flow_state);
        self.conc_hist.insert(0, conc_state);
        self.flow_hist.truncate(3);
        self.conc_hist.truncate(3);

        Ok(StepReport { step: self.step, t, conservation })
    }

    /// Run all remaining steps, invoking `hook` after each one.
    pub fn run(&mut self, mut hook: impl FnMut(&Simulation, &StepReport) -> Result<()>) -> Result<()> {
        while self.step < self.grid.n_steps {
            let report = self.advance()?;
            hook(self, &report)?;
        }
        Ok(())
    }
}
