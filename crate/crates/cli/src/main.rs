//! Command-line drivers: convergence studies, scenario simulation, mesh
//! inspection and the runtime invariant suite.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{build_config, ExampleId, RunConfig};
use sdhdg::mesh::Mesh;
use sdhdg::problem::{KappaModel, MuModel, ProblemConfig};
use sdhdg::timeloop::{Simulation, TimeGrid};
use sdhdg::verification::{
    convergence_study, example3_problem, report_conservation, StudyConfig, StudyExample,
};
use sdhdg::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdhdg", about = "Coupled Stokes/Darcy-transport HDG solver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat key=value configuration file; flags override file keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario: example1 | example2 | example3 | custom.
    #[arg(long)]
    example: Option<String>,
    /// Velocity polynomial degree.
    #[arg(long)]
    kf: Option<usize>,
    /// Concentration degree (default k_f - 1).
    #[arg(long)]
    kc: Option<usize>,
    /// Mesh subdivisions per direction (even).
    #[arg(short, long)]
    n: Option<usize>,
    /// Time step (default: 0.1 h^k_f / (k_f+1)).
    #[arg(long)]
    dt: Option<f64>,
    /// Final time.
    #[arg(long)]
    t_end: Option<f64>,
    /// Permeability (number or "heterogeneous").
    #[arg(long)]
    kappa: Option<String>,
    /// Viscosity (number or "quarter_power").
    #[arg(long)]
    mu: Option<String>,
    /// Time scheme: be | bdf3.
    #[arg(long)]
    scheme: Option<String>,
    /// Static condensation of cell unknowns.
    #[arg(long)]
    condense: Option<bool>,
    /// Output directory (SDHDG_OUT env var is honored as root).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl CommonOpts {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("example", self.example.clone());
        push("flow.k_f", self.kf.map(|v| v.to_string()));
        push("flow.k_c", self.kc.map(|v| v.to_string()));
        push("mesh.n", self.n.map(|v| v.to_string()));
        push("time.dt", self.dt.map(|v| format!("{v:e}")));
        push("time.t_end", self.t_end.map(|v| v.to_string()));
        push("coeff.kappa", self.kappa.clone());
        push("coeff.mu", self.mu.clone());
        push("time.scheme", self.scheme.clone());
        push("solver.condense", self.condense.map(|v| v.to_string()));
        push(
            "output.dir",
            self.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
        );
        kv
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a manufactured-solution convergence study and write a CSV table.
    Convergence {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated mesh subdivisions, e.g. 4,8,16.
        #[arg(long)]
        resolutions: Option<String>,
    },
    /// Run a scenario and write VTK snapshots plus a conservation log.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Snapshot times (comma separated); a snapshot after the first
        /// step is always written.
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Print mesh statistics; optionally dump the mesh as legacy VTK.
    MeshInfo {
        /// Mesh subdivisions per direction (even).
        #[arg(short, long, default_value_t = 8)]
        n: usize,
        /// Write the mesh to this VTK file.
        #[arg(long)]
        vtk: Option<PathBuf>,
    },
    /// Run the runtime invariant suite (quadrature, interpolation,
    /// conservation, determinism) and report pass/fail per check.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convergence { common, resolutions } => cmd_convergence(common, resolutions),
        Command::Simulate { common, snapshots } => cmd_simulate(common, snapshots),
        Command::MeshInfo { n, vtk } => cmd_mesh_info(n, vtk),
        Command::Check => cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Mesh(_) | Error::Quadrature(..) => ExitCode::from(2),
                Error::Solver(_) | Error::SelfCheck(_) => ExitCode::from(3),
            }
        }
    }
}

fn load_config(common: &CommonOpts, extra: &[(String, String)]) -> sdhdg::Result<RunConfig> {
    let mut overrides = common.overrides();
    overrides.extend(extra.iter().cloned());
    build_config(common.config.as_deref(), &overrides)
}

fn write_echo(cfg: &RunConfig) -> sdhdg::Result<PathBuf> {
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output dir {dir:?}: {e}")))?;
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.echo())
        .map_err(|e| Error::Config(format!("cannot write {path:?}: {e}")))?;
    Ok(dir)
}

fn cmd_convergence(common: CommonOpts, resolutions: Option<String>) -> sdhdg::Result<()> {
    let mut extra = Vec::new();
    if let Some(r) = resolutions {
        extra.push(("run.resolutions".to_string(), r));
    }
    let cfg = load_config(&common, &extra)?;
    let example = match cfg.example {
        ExampleId::Example1 | ExampleId::Custom => StudyExample::Example1,
        ExampleId::Example2 => StudyExample::Example2,
        ExampleId::Example3 => {
            return Err(Error::Config(
                "example3 has no manufactured solution; use `simulate`".into(),
            ))
        }
    };
    let dir = write_echo(&cfg)?;

    let mut study = StudyConfig::new(example, cfg.k_f, cfg.kappa, cfg.mu);
    study.resolutions = cfg.resolutions.clone();
    study.scheme = cfg.scheme;
    study.t_end = cfg.t_end;
    study.condense = cfg.condense;
    study.conservation = cfg.conservation_report;
    let result = convergence_study(&study)?;
    print!("{}", result.console_table());
    let csv = result.to_csv();
    let csv_path = dir.join("convergence.csv");
    std::fs::write(&csv_path, &csv)
        .map_err(|e| Error::Config(format!("cannot write {csv_path:?}: {e}")))?;
    println!("wrote {}", csv_path.display());
    if cfg.conservation_report {
        for row in &result.rows {
            if let Some(c) = &row.conservation {
                println!(
                    "n={:<3} worst conservation: div_s {:.2e}, darcy residual {:.2e} (scale {:.2e}), jumps {:.2e}/{:.2e} (scale {:.2e})",
                    row.n, c.div_s, c.div_residual_d, c.data_scale_d,
                    c.jump_noninterface, c.jump_interface, c.jump_scale
                );
            }
        }
    }
    Ok(())
}

fn problem_for(cfg: &RunConfig) -> sdhdg::Result<ProblemConfig> {
    match cfg.example {
        ExampleId::Example1 | ExampleId::Example2 => {
            let study_example = if cfg.example == ExampleId::Example1 {
                StudyExample::Example1
            } else {
                StudyExample::Example2
            };
            let study = StudyConfig::new(study_example, cfg.k_f, cfg.kappa, cfg.mu);
            let (_, problem) = study.build_problem()?;
            Ok(problem)
        }
        ExampleId::Example3 => {
            let mut problem = example3_problem(cfg.heterogeneous_kappa);
            if let Some(a) = cfg.alpha {
                problem.alpha = a;
            }
            problem.phi = cfg.phi;
            if let Some((mu0, mu1)) = cfg.quarter_power {
                problem.mu = MuModel::QuarterPower { mu0, mu1 };
            }
            Ok(problem)
        }
        ExampleId::Custom => {
            let mut problem = ProblemConfig::zero();
            problem.kappa = if cfg.heterogeneous_kappa {
                KappaModel::Heterogeneous
            } else {
                KappaModel::Constant(cfg.kappa)
            };
            problem.mu = match cfg.quarter_power {
                Some((mu0, mu1)) => MuModel::QuarterPower { mu0, mu1 },
                None => MuModel::Constant(cfg.mu),
            };
            if let Some(a) = cfg.alpha {
                problem.alpha = a;
            }
            problem.phi = cfg.phi;
            if !cfg.mean_constraint {
                problem.mean_constraint = sdhdg::problem::MeanConstraint::Off;
            }
            Ok(problem)
        }
    }
}

fn cmd_simulate(common: CommonOpts, snapshots: Option<String>) -> sdhdg::Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = snapshots {
        extra.push(("output.snapshots".to_string(), s));
    }
    let cfg = load_config(&common, &extra)?;
    let dir = write_echo(&cfg)?;
    let problem = problem_for(&cfg)?;
    let disc = cfg.discretization()?;
    let mesh = Mesh::structured(cfg.n)?;
    let dt = cfg.effective_dt(cfg.n);
    let grid = TimeGrid::new(dt, cfg.t_end)?;
    if grid.rounded {
        eprintln!(
            "warning: T/dt = {} is not an integer; running {} steps",
            cfg.t_end / dt,
            grid.n_steps
        );
    }

    // Snapshot steps: nearest step per requested time; the first step is
    // always written. A mismatch beyond dt/2 is a configuration error.
    let mut snapshot_steps = vec![1usize];
    for &t in &cfg.snapshots {
        let step = (t / dt).round() as usize;
        if ((step as f64) * dt - t).abs() > dt / 2.0 + 1e-12 || step > grid.n_steps {
            return Err(Error::Config(format!(
                "snapshot time {t} is not within dt/2 of a time step"
            )));
        }
        snapshot_steps.push(step);
    }
    snapshot_steps.sort_unstable();
    snapshot_steps.dedup();

    let mut sim = Simulation::new(mesh, problem, disc, cfg.scheme, grid)?;
    sim.conservation_check = cfg.conservation_report;
    println!(
        "simulate {}: n = {}, k_f = {}, dt = {:e}, T = {}, steps = {}",
        cfg.example.name(),
        cfg.n,
        cfg.k_f,
        dt,
        cfg.t_end,
        sim.grid.n_steps
    );
    let (c_min0, c_max0) = concentration_range(&sim);
    println!("initial concentration range: [{c_min0:.4}, {c_max0:.4}]");

    let log_every = (sim.grid.n_steps / 50).max(1);
    let mut log = String::from("step,t,div_s,darcy_residual,jump_noninterface,jump_interface\n");
    let mut snapshot_idx = 0usize;
    let t_start = std::time::Instant::now();
    sim.run(|sim, report| {
        if let Some(c) = &report.conservation {
            log.push_str(&format!(
                "{},{:.6e},{:.3e},{:.3e},{:.3e},{:.3e}\n",
                report.step, report.t, c.l2_div_s, c.max_div_residual_d,
                c.max_jump_noninterface, c.max_jump_interface
            ));
            if report.step % log_every == 0 || report.step == sim.grid.n_steps {
                println!(
                    "step {:>6} t {:.4}: div_s {:.2e}, darcy residual {:.2e}",
                    report.step, report.t, c.l2_div_s, c.max_div_residual_d
                );
            }
        } else if report.step % log_every == 0 {
            println!("step {:>6} t {:.4}", report.step, report.t);
        }
        if snapshot_idx < snapshot_steps.len() && report.step == snapshot_steps[snapshot_idx] {
            let path = dir.join(format!("snapshot_{:06}.vtk", report.step));
            sdhdg::vtk::write_snapshot(
                &path,
                &sim.mesh,
                &sim.tables,
                &sim.flow.dofs,
                &sim.problem,
                sim.current_flow(),
                sim.current_conc(),
                &format!("t = {}", report.t),
            )?;
            let (lo, hi) = concentration_range(sim);
            println!(
                "snapshot {} at t = {:.4} (c range [{lo:.4}, {hi:.4}])",
                path.display(),
                report.t
            );
            snapshot_idx += 1;
        }
        Ok(())
    })?;

    let log_path = dir.join("conservation.csv");
    std::fs::write(&log_path, log)
        .map_err(|e| Error::Config(format!("cannot write {log_path:?}: {e}")))?;
    let final_report = report_conservation(&sim, sim.time());
    let (lo, hi) = concentration_range(&sim);
    println!(
        "done in {:.1?}: final c range [{lo:.4}, {hi:.4}], div_s {:.2e}, darcy residual {:.2e}",
        t_start.elapsed(),
        final_report.l2_div_s,
        final_report.max_div_residual_d
    );
    Ok(())
}

/// Concentration range over element corner samples.
fn concentration_range(sim: &Simulation) -> (f64, f64) {
    let conc = sim.current_conc();
    let basis = &sim.tables.cell_space(conc.k).basis;
    let mut vals = vec![0.0; conc.dim_c];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in 0..sim.mesh.n_elements() {
        let coefs = conc.c_coeffs(e);
        for corner in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0 / 3.0, 1.0 / 3.0]] {
            basis.eval(corner, &mut vals);
            let v: f64 = coefs.iter().zip(&vals).map(|(c, b)| c * b).sum();
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn cmd_mesh_info(n: usize, vtk: Option<PathBuf>) -> sdhdg::Result<()> {
    let mesh = Mesh::structured(n)?;
    let boundary = mesh.facets.iter().filter(|f| f.kind.is_boundary()).count();
    println!("mesh n = {n}:");
    println!("  vertices:          {}", mesh.vertices.len());
    println!("  triangles:         {}", mesh.n_elements());
    println!("  facets:            {}", mesh.n_facets());
    println!("  boundary facets:   {boundary}");
    println!("  interface facets:  {}", mesh.interface_facets.len());
    println!("  h (diameter):      {:.6e}", mesh.h_max);
    let area: f64 = (0..mesh.n_elements())
        .map(|e| mesh.element_geometry(e).map(|g| g.area).unwrap_or(0.0))
        .sum();
    println!("  total area:        {area:.16}");
    if let Some(path) = vtk {
        sdhdg::vtk::write_mesh(&path, &mesh)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_check() -> sdhdg::Result<()> {
    use sdhdg::fem::quadrature::{edge_quadrature, triangle_quadrature};
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Quadrature exactness.
    {
        let mut ok = true;
        for d in 0..=12 {
            let q = triangle_quadrature(d)?;
            for a in 0..=d {
                for b in 0..=(d - a) {
                    let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>().max(1.0);
                    let exact = fact(a) * fact(b) / fact(a + b + 2);
                    let got: f64 = q
                        .points
                        .iter()
                        .zip(&q.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                        .sum();
                    ok &= (got - exact).abs() <= 1e-13 * exact.max(1.0);
                }
            }
            let e = edge_quadrature(d)?;
            for m in 0..=d {
                let got: f64 = e
                    .points
                    .iter()
                    .zip(&e.weights)
                    .map(|(t, w)| w * t.powi(m as i32))
                    .sum();
                ok &= (got - 1.0 / (m as f64 + 1.0)).abs() <= 1e-13;
            }
        }
        check("quadrature exactness (triangle and edge, degrees 0..=12)", ok);
    }

    // Velocity interpolation reproduces polynomials and is normal-continuous.
    {
        let mesh = Mesh::structured(4)?;
        let vol = triangle_quadrature(10)?;
        let edge = edge_quadrature(10)?;
        let u = |x: [f64; 2]| -> [f64; 2] { [x[0] * x[1] + 1.0, x[1] * x[1] - 2.0 * x[0]] };
        let interp = sdhdg::fem::projection::bdm_interpolate(&u, &mesh, 2, &vol, &edge)?;
        let basis = sdhdg::fem::TriBasis::new(2);
        let mut vals = vec![0.0; basis.dim];
        let mut ok = true;
        for e in 0..mesh.n_elements() {
            let geom = mesh.element_geometry(e)?;
            for xi in [[0.3, 0.2], [0.1, 0.7]] {
                basis.eval(xi, &mut vals);
                let ux: f64 = (0..basis.dim).map(|i| interp[e][i] * vals[i]).sum();
                let uy: f64 = (0..basis.dim).map(|i| interp[e][basis.dim + i] * vals[i]).sum();
                let x = geom.to_physical(xi);
                ok &= (ux - u(x)[0]).abs() < 1e-11 && (uy - u(x)[1]).abs() < 1e-11;
            }
        }
        check("velocity interpolation reproduces [P_2]^2", ok);
    }

    // Coupled solve: conservation and determinism on a coarse manufactured
    // problem.
    {
        let study = StudyConfig::new(StudyExample::Example1, 2, 1.0, 1.0);
        let (_, problem) = study.build_problem()?;
        let run = || -> sdhdg::Result<(Vec<f64>, sdhdg::flow::ConservationReport)> {
            let mesh = Mesh::structured(4)?;
            let disc = study_disc()?;
            let grid = TimeGrid::new(0.1 / 48.0, 0.02)?;
            let mut sim =
                Simulation::new(mesh, problem.clone(), disc, sdhdg::timeloop::TimeScheme::Bdf3, grid)?;
            sim.run(|_, _| Ok(()))?;
            let report = report_conservation(&sim, sim.time());
            Ok((sim.current_flow().cell.clone(), report))
        };
        let (a, report) = run()?;
        let (b, _) = run()?;
        check(
            "strong mass conservation (div residuals and normal jumps)",
            report.l2_div_s < 1e-10
                && report.max_div_residual_d < 1e-9 * report.data_scale_d
                && report.max_jump_noninterface < 1e-18 * report.jump_scale
                && report.max_jump_interface < 1e-18 * report.jump_scale,
        );
        check("deterministic rerun (bit-identical states)", a == b);
    }

    if failures > 0 {
        Err(Error::SelfCheck(format!("{failures} check(s) failed")))
    } else {
        println!("all checks passed");
        Ok(())
    }
}

fn study_disc() -> sdhdg::Result<sdhdg::problem::Discretization> {
    let mut disc = sdhdg::problem::Discretization::new(2)?;
    disc.condense = true;
    Ok(disc)
}
