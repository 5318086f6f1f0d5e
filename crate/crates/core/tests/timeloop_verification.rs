//! Tests of initialization, the sequential stepping driver, manufactured
//! solutions and the error/rate machinery.

use sdhdg::fem::tables::{class_index, MeshTables};
use sdhdg::mesh::{Mesh, Region};
use sdhdg::problem::{Discretization, DispersionModel, ProblemConfig};
use sdhdg::timeloop::{Simulation, TimeGrid, TimeScheme};
use sdhdg::verification::{
    compute_errors, example1_exact, example3_problem, synthesize_sources, ManufacturedSolution,
};
use std::f64::consts::PI;
use std::sync::Arc;

fn example1_problem(kappa: f64, mu: f64) -> (ManufacturedSolution, ProblemConfig) {
    let exact = example1_exact(kappa, mu);
    let problem = synthesize_sources(
        &exact,
        DispersionModel::ConstantMatrix {
            d_s: [[0.01, 0.005], [0.005, 0.02]],
            d_d: [[0.01, 0.005], [0.005, 0.02]],
        },
        1.0,
    )
    .unwrap();
    (exact, problem)
}

#[test]
fn exact_solution_point_values_and_interface() {
    let exact = example1_exact(1.0, 1.0);
    // Direct formula evaluation at (0, 0.5, 0): u_s = (0, e^{1/4}/pi).
    let u = exact.u([0.0, 0.5], 0.0, Region::Stokes);
    assert!(u[0].abs() < 1e-15);
    assert!((u[1] - (0.25f64).exp() / PI).abs() < 1e-15);
    // Normal continuity across the interface at random samples.
    for i in 0..7 {
        let x = [0.1 + 0.12 * i as f64, 0.5];
        for t in [0.0, 0.05, 0.1] {
            let us = exact.u(x, t, Region::Stokes);
            let ud = exact.u(x, t, Region::Darcy);
            assert!((us[1] - ud[1]).abs() < 1e-14);
        }
    }
    // c stays within [-1, 1].
    for i in 0..25 {
        let x = [(i as f64 * 0.618) % 1.0, (i as f64 * 0.271) % 1.0];
        let c = exact.c(x, 0.07);
        assert!((-1.0..=1.0).contains(&c));
    }
    // div u_s = 0 at samples.
    for i in 0..9 {
        let x = [0.05 + 0.1 * i as f64, 0.6 + 0.04 * i as f64];
        let g = exact.grad_u(x, 0.03, Region::Stokes);
        assert!((g[0][0] + g[1][1]).abs() < 1e-13);
    }
}

#[test]
fn manufactured_mass_source_formula() {
    // g_p - g_i = (2 pi - 1/(2 pi)) cos(pi x1 + t) e^{(x2+t)/2}, from the
    // divergence of the Darcy velocity.
    let exact = example1_exact(2.0, 3.0);
    for (x, t) in [([0.3, 0.2], 0.0), ([0.8, 0.45], 0.07)] {
        let expected =
            (2.0 * PI - 1.0 / (2.0 * PI)) * (PI * x[0] + t).cos() * ((x[1] + t) / 2.0).exp();
        let got = -exact.div_u(x, t, Region::Darcy);
        assert!((got - expected).abs() < 1e-13 * expected.abs().max(1.0));
    }
}

#[test]
fn interface_conditions_hold_for_both_viscosity_models() {
    let disp = DispersionModel::ConstantMatrix {
        d_s: [[0.01, 0.005], [0.005, 0.02]],
        d_d: [[0.01, 0.005], [0.005, 0.02]],
    };
    for exact in [
        example1_exact(1.0, 1.0),
        example1_exact(1e3, 1e-6),
        sdhdg::verification::example2_exact(1.0, 0.9, 1.3),
        sdhdg::verification::example2_exact(1e-3, 0.9, 1.3),
    ] {
        let r = exact.interface_residual(&disp, 1.0);
        assert!(r < 1e-12, "interface residual {r}");
    }
    // The velocity-diagonal dispersion also keeps the flux continuous.
    let exact = sdhdg::verification::example2_exact(1.0, 0.9, 1.3);
    let r = exact.interface_residual(&DispersionModel::VelocityDiagonal, 1.0);
    assert!(r < 1e-12, "dispersion flux residual {r}");
}

#[test]
fn initialization_cases() {
    // Zero initial velocity gives the zero state.
    let problem = example3_problem(true);
    let mesh = Mesh::structured(8).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1e-3, 0.0).unwrap();
    let sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid).unwrap();
    assert!(sim.current_flow().cell.iter().all(|v| v.abs() < 1e-14));

    // The blob initial concentration projects to element means in
    // [0.05, 0.95] (convex combinations under positive quadrature weights).
    let sqrt2 = std::f64::consts::SQRT_2;
    for e in 0..sim.mesh.n_elements() {
        let mean = sim.current_conc().c_coeffs(e)[0] * sqrt2;
        assert!(
            (0.05 - 1e-9..=0.95 + 1e-9).contains(&mean),
            "element {e} mean {mean}"
        );
    }

    // A divergence-free polynomial initial velocity stays exactly
    // divergence-free under the moment interpolation.
    let mut problem = ProblemConfig::zero();
    problem.u0 = Arc::new(|x| [x[1] * x[1], 0.3 - x[0]]);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1e-3, 0.0).unwrap();
    let sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    let tables = &sim.tables;
    let su = tables.cell_space(2);
    for (e, tri) in sim.mesh.tris.iter().enumerate() {
        let vol = &su.vol[class_index(tri.class)];
        let (ux, uy) = sim.current_flow().u_coeffs(&sim.flow.dofs, e);
        for q in 0..tables.vol_rule.points.len() {
            let grads = &vol.grads[q * 6..(q + 1) * 6];
            let mut div = 0.0;
            for i in 0..6 {
                div += ux[i] * grads[i][0] + uy[i] * grads[i][1];
            }
            assert!(div.abs() < 1e-12, "element {e}: div {div}");
        }
    }
}

#[test]
fn zero_steps_returns_initial_states() {
    let (_, problem) = example1_problem(1.0, 1.0);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1e-3, 0.0).unwrap();
    assert_eq!(grid.n_steps, 0);
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid).unwrap();
    let c0 = sim.current_conc().cell.clone();
    sim.run(|_, _| Ok(())).unwrap();
    assert_eq!(sim.step_index(), 0);
    assert_eq!(sim.current_conc().cell, c0);
}

#[test]
fn advance_is_identity_at_steady_state() {
    // Time-independent data: after enough backward Euler steps the iterates
    // reach the discrete steady state and one further step changes nothing.
    let mut problem = ProblemConfig::zero();
    problem.f_s = Some(Arc::new(|_x, _t, _c| [0.0, 1.0]));
    problem.c0 = Arc::new(|x| if x[0] < 0.5 { 1.0 } else { 0.0 });
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(0.5, 40.0).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    let mut prev = (sim.current_flow().cell.clone(), sim.current_conc().cell.clone());
    let mut last_delta = f64::INFINITY;
    for _ in 0..sim.grid.n_steps {
        sim.advance().unwrap();
        let delta: f64 = sim
            .current_flow()
            .cell
            .iter()
            .zip(&prev.0)
            .chain(sim.current_conc().cell.iter().zip(&prev.1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        prev = (sim.current_flow().cell.clone(), sim.current_conc().cell.clone());
        last_delta = delta;
    }
    assert!(last_delta < 1e-10, "steady fixed point not reached: {last_delta}");
}

#[test]
fn bdf3_single_step_sanity() {
    // One small backward Euler step from exact initial data stays close to
    // the exact solution (no blow-up; errors at the discretization scale).
    let (exact, problem) = example1_problem(1.0, 1.0);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let dt = 1e-4;
    let grid = TimeGrid::new(dt, dt).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    sim.advance().unwrap();
    let err = compute_errors(
        &sim.mesh,
        &sim.tables,
        &sim.flow.dofs,
        sim.current_flow(),
        sim.current_conc(),
        &exact,
        dt,
    );
    assert!(err.err_u_s < 5e-3, "u_s error {}", err.err_u_s);
    assert!(err.err_c < 0.2, "c error {}", err.err_c);
    assert!(err.div_s < 1e-10);
}

#[test]
fn deterministic_full_runs() {
    let (_, problem) = example1_problem(1.0, 1.0);
    let run = || {
        let mesh = Mesh::structured(4).unwrap();
        let disc = Discretization::new(2).unwrap();
        let grid = TimeGrid::new(0.1 / 48.0, 0.02).unwrap();
        let mut sim =
            Simulation::new(mesh, problem.clone(), disc, TimeScheme::Bdf3, grid).unwrap();
        sim.run(|_, _| Ok(())).unwrap();
        (
            sim.current_flow().cell.clone(),
            sim.current_flow().facet.clone(),
            sim.current_conc().cell.clone(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn energy_decay_without_sources() {
    // Plume-like closed setup: heterogeneous permeability flow driven only
    // by the initial concentration blob, no wells, zero inflow. The
    // porosity-weighted L2 norm of c is non-increasing under backward Euler.
    let mut problem = example3_problem(true);
    // Close the cavity: replace the inflow by a no-slip wall.
    problem.bc.s1 = sdhdg::problem::FlowBc::VelocityDirichlet(Arc::new(|_, _| [0.0, 0.0]));
    problem.bc.s2 = sdhdg::problem::FlowBc::VelocityDirichlet(Arc::new(|_, _| [0.0, 0.0]));
    let mesh = Mesh::structured(8).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(0.05, 0.5).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    let det_jac = sim.tables.det_jac;
    let mut prev = sim.current_conc().weighted_l2(&sim.mesh, det_jac, 0.4);
    for _ in 0..sim.grid.n_steps {
        sim.advance().unwrap();
        let now = sim.current_conc().weighted_l2(&sim.mesh, det_jac, 0.4);
        assert!(
            now <= prev * (1.0 + 1e-10),
            "energy grew: {prev} -> {now}"
        );
        prev = now;
    }
}

#[test]
fn sequential_coupling_uses_fresh_velocity() {
    // The transport step at step n must consume the flow state solved at
    // step n: with data switched on abruptly at t > 0, the concentration
    // responds in the same step through the advective coupling.
    let (_, mut problem) = example1_problem(1.0, 1.0);
    // Start from zero concentration so advection of c is initially absent
    // but the manufactured source drives it immediately.
    problem.c0 = Arc::new(|_| 0.0);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let dt = 1e-3;
    let grid = TimeGrid::new(dt, dt).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    let report = sim.advance().unwrap();
    assert_eq!(report.step, 1);
    assert!((report.t - dt).abs() < 1e-15);
    // Flow state at t = dt is nontrivial and concentration moved.
    assert!(sim.current_flow().cell.iter().any(|v| v.abs() > 1e-6));
    assert!(sim.current_conc().cell.iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn error_report_sanity() {
    let (exact, problem) = example1_problem(1.0, 1.0);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1e-3, 0.0).unwrap();
    let sim = Simulation::new(mesh, problem, disc, TimeScheme::BE, grid).unwrap();
    // Errors of the interpolated initial state against the exact fields at
    // t = 0 equal projection errors: strictly positive, small.
    let err = compute_errors(
        &sim.mesh,
        &sim.tables,
        &sim.flow.dofs,
        sim.current_flow(),
        sim.current_conc(),
        &exact,
        0.0,
    );
    assert!(err.err_u_s > 0.0 && err.err_u_s < 1e-2);
    assert!(err.err_c > 0.0 && err.err_c < 0.5);
    // Zero state vs zero exact: compare against itself at no data.
    let zero_mesh = Mesh::structured(2).unwrap();
    let disc2 = Discretization::new(2).unwrap();
    let grid2 = TimeGrid::new(1e-3, 0.0).unwrap();
    let sim2 = Simulation::new(
        zero_mesh,
        ProblemConfig::zero(),
        disc2,
        TimeScheme::BE,
        grid2,
    )
    .unwrap();
    assert!(sim2.current_flow().cell.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn rates_are_scale_invariant() {
    use sdhdg::verification::{ErrorReport, StudyResult, StudyRow};
    let mk = |e: f64| ErrorReport {
        err_u_s: e,
        err_p_s: e,
        err_u_d: e,
        err_p_d: e,
        err_c: e,
        div_s: 0.0,
        div_d_proj: 0.0,
    };
    let rows = |scale: f64| StudyResult {
        config_summary: vec![],
        rows: vec![
            StudyRow { n: 4, h: 0.25, dofs: 100, errors: mk(scale * 1.0), conservation: None },
            StudyRow { n: 8, h: 0.125, dofs: 400, errors: mk(scale * 0.125), conservation: None },
        ],
    };
    let a = rows(1.0);
    let b = rows(77.3);
    let ra = a.rates(|e| e.err_u_s)[1].unwrap();
    let rb = b.rates(|e| e.err_u_s)[1].unwrap();
    assert!((ra - 3.0).abs() < 1e-12);
    assert!((ra - rb).abs() < 1e-12);
}

#[test]
fn csv_schema() {
    use sdhdg::verification::{convergence_study, StudyConfig, StudyExample};
    let mut cfg = StudyConfig::new(StudyExample::Example1, 2, 1.0, 1.0);
    cfg.resolutions = vec![2];
    cfg.t_end = 0.01;
    let result = convergence_study(&cfg).unwrap();
    let csv = result.to_csv();
    let header = csv
        .lines()
        .find(|l| !l.starts_with('#'))
        .expect("has a header line");
    assert_eq!(
        header,
        "h,dofs,err_u_s,rate_u_s,err_p_s,rate_p_s,err_u_d,rate_u_d,err_p_d,rate_p_d,err_c,rate_c,div_s,div_d_proj"
    );
    // One data row for one resolution, no rates.
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with('h')).collect();
    assert_eq!(data.len(), 1);
    assert!(data[0].contains(",,"), "single-resolution study must not print rates");
    // Metadata lines are '#'-prefixed.
    assert!(csv.lines().next().unwrap().starts_with('#'));
}

#[test]
fn snapshot_times_and_vtk_output() {
    let problem = example3_problem(true);
    let mesh = Mesh::structured(8).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(0.05, 0.2).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid).unwrap();
    let dir = std::env::temp_dir().join("sdhdg_vtk_test");
    std::fs::create_dir_all(&dir).unwrap();
    let mut written = Vec::new();
    sim.run(|sim, report| {
        if report.step == sim.grid.n_steps {
            let path = dir.join(format!("snap_{:04}.vtk", report.step));
            sdhdg::vtk::write_snapshot(
                &path,
                &sim.mesh,
                &sim.tables,
                &sim.flow.dofs,
                &sim.problem,
                sim.current_flow(),
                sim.current_conc(),
                "test",
            )?;
            written.push(path);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(written.len(), 1);
    let body = std::fs::read_to_string(&written[0]).unwrap();
    assert!(body.starts_with("# vtk DataFile Version 3.0"));
    assert!(body.contains("UNSTRUCTURED_GRID"));
    assert!(body.contains("SCALARS concentration"));
    assert!(body.contains("VECTORS velocity"));
    assert!(body.contains("SCALARS permeability"));
    // Deterministic output.
    let again = dir.join("snap_again.vtk");
    sdhdg::vtk::write_snapshot(
        &again,
        &sim.mesh,
        &sim.tables,
        &sim.flow.dofs,
        &sim.problem,
        sim.current_flow(),
        sim.current_conc(),
        "test",
    )
    .unwrap();
    let body2 = std::fs::read_to_string(&again).unwrap();
    assert_eq!(body, body2);
}

/// Outflow boundaries are advectively transparent: the plume scenario's
/// concentration oscillations decay instead of piling up at the traction
/// and pressure outflow walls (which is what a zero-total-flux facet
/// equation would produce).
#[test]
fn outflow_boundaries_are_transparent() {
    let problem = example3_problem(true);
    let mesh = Mesh::structured(8).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(0.02, 1.0).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid).unwrap();
    let corner_range = |sim: &Simulation| -> (f64, f64) {
        let conc = sim.current_conc();
        let basis = &sim.tables.cell_space(conc.k).basis;
        let mut vals = vec![0.0; conc.dim_c];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in 0..sim.mesh.n_elements() {
            for xi in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] {
                basis.eval(xi, &mut vals);
                let v: f64 = conc.c_coeffs(e).iter().zip(&vals).map(|(c, b)| c * b).sum();
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    };
    sim.advance().unwrap();
    let (lo1, hi1) = corner_range(&sim);
    for _ in 1..sim.grid.n_steps {
        sim.advance().unwrap();
    }
    let (lo2, hi2) = corner_range(&sim);
    // The projection/startup overshoot decays; nothing accumulates at the
    // outflow walls.
    assert!(hi2 <= hi1 + 1e-6, "overshoot grew: {hi1} -> {hi2}");
    assert!(lo2 >= lo1 - 1e-6, "undershoot grew: {lo1} -> {lo2}");
    assert!(hi2 < 1.7 && lo2 > -0.7, "range [{lo2}, {hi2}] unreasonable");
}

#[test]
fn quadrature_convergence_of_error_integrals() {
    // Doubling the quadrature order changes reported errors by well under
    // 0.1 percent.
    let (exact, problem) = example1_problem(1.0, 1.0);
    let mesh = Mesh::structured(4).unwrap();
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1e-3, 5e-3).unwrap();
    let mut sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid).unwrap();
    sim.run(|_, _| Ok(())).unwrap();
    let e1 = compute_errors(
        &sim.mesh, &sim.tables, &sim.flow.dofs, sim.current_flow(), sim.current_conc(), &exact, sim.time(),
    );
    let fine_tables = MeshTables::build(&sim.mesh, &[2, 1], &[2, 1], 2 * sim.tables.vol_rule.degree).unwrap();
    let e2 = compute_errors(
        &sim.mesh, &fine_tables, &sim.flow.dofs, sim.current_flow(), sim.current_conc(), &exact, sim.time(),
    );
    for (a, b) in [
        (e1.err_u_s, e2.err_u_s),
        (e1.err_p_s, e2.err_p_s),
        (e1.err_u_d, e2.err_u_d),
        (e1.err_c, e2.err_c),
    ] {
        assert!((a - b).abs() < 1e-3 * a, "quadrature sensitivity: {a} vs {b}");
    }
}
