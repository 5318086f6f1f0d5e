//! Browser demo: an interactive plume simulation on a coarse mesh, a
//! permeability-field explorer, and a small manufactured convergence table.
//!
//! Build with `wasm-pack build --target web crates/demo` and serve the
//! `www/` page next to the generated `pkg/` directory. All exposed
//! functions are plain Rust and are exercised natively by the crate tests.

use sdhdg::mesh::{Mesh, TriClass};
use sdhdg::problem::Discretization;
use sdhdg::timeloop::{Simulation, TimeGrid, TimeScheme};
use sdhdg::verification::{
    convergence_study, example3_problem, report_conservation, StudyConfig, StudyExample,
};
use wasm_bindgen::prelude::*;

/// Interactive heterogeneous-plume simulation (coarse variant of the
/// contaminant scenario: parabolic inflow at the upper left, traction
/// outflow on the right, pressure-driven leakage through the bottom).
#[wasm_bindgen]
pub struct PlumeDemo {
    sim: Simulation,
}

#[wasm_bindgen]
impl PlumeDemo {
    /// Create a demo simulation. `n` is clamped to an even value in
    /// [8, 32]; `dt` to [1e-4, 0.05].
    #[wasm_bindgen(constructor)]
    pub fn new(n: u32, heterogeneous: bool, dt: f64) -> PlumeDemo {
        let n = (n as usize).clamp(8, 32) & !1;
        let dt = dt.clamp(1e-4, 0.05);
        let problem = example3_problem(heterogeneous);
        let mut disc = Discretization::new(2).expect("degree 2 is valid");
        disc.condense = true;
        let mesh = Mesh::structured(n).expect("clamped subdivision count is valid");
        // An effectively unbounded horizon; the caller steps interactively.
        let grid = TimeGrid::new(dt, dt * 1e9).expect("valid grid");
        let sim = Simulation::new(mesh, problem, disc, TimeScheme::Bdf3, grid)
            .expect("demo setup is well-posed");
        PlumeDemo { sim }
    }

    /// Advance `count` steps; returns the new simulation time.
    pub fn step(&mut self, count: u32) -> f64 {
        for _ in 0..count {
            if self.sim.advance().is_err() {
                break;
            }
        }
        self.sim.time()
    }

    pub fn time(&self) -> f64 {
        self.sim.time()
    }

    /// Rasterize the concentration field into RGBA pixels (row-major,
    /// y flipped for canvas orientation).
    pub fn concentration_rgba(&self, width: u32, height: u32) -> Vec<u8> {
        let conc = self.sim.current_conc();
        let basis = &self.sim.tables.cell_space(conc.k).basis;
        let mut vals = vec![0.0; conc.dim_c];
        rasterize(&self.sim.mesh, width, height, |e, xi| {
            basis.eval(xi, &mut vals);
            let v: f64 = conc.c_coeffs(e).iter().zip(&vals).map(|(c, b)| c * b).sum();
            colormap((v - 0.05) / 0.9)
        })
    }

    /// Rasterize the velocity magnitude.
    pub fn speed_rgba(&self, width: u32, height: u32, scale: f64) -> Vec<u8> {
        let flow = self.sim.current_flow();
        let dofs = &self.sim.flow.dofs;
        let basis = &self.sim.tables.cell_space(dofs.k).basis;
        let mut vals = vec![0.0; dofs.dim_u];
        rasterize(&self.sim.mesh, width, height, |e, xi| {
            basis.eval(xi, &mut vals);
            let (ux, uy) = flow.u_coeffs(dofs, e);
            let u: f64 = ux.iter().zip(&vals).map(|(c, b)| c * b).sum();
            let v: f64 = uy.iter().zip(&vals).map(|(c, b)| c * b).sum();
            colormap((u.hypot(v) * scale).min(1.0))
        })
    }

    /// Velocity samples on an nx-by-ny grid: flat [x, y, u, v] quadruples
    /// in domain coordinates, for arrow overlays.
    pub fn velocity_arrows(&self, nx: u32, ny: u32) -> Vec<f32> {
        let flow = self.sim.current_flow();
        let dofs = &self.sim.flow.dofs;
        let basis = &self.sim.tables.cell_space(dofs.k).basis;
        let mut vals = vec![0.0; dofs.dim_u];
        let mut out = Vec::with_capacity((nx * ny * 4) as usize);
        for j in 0..ny {
            for i in 0..nx {
                let x = (i as f64 + 0.5) / nx as f64;
                let y = (j as f64 + 0.5) / ny as f64;
                let (e, xi) = locate(&self.sim.mesh, x, y);
                basis.eval(xi, &mut vals);
                let (ux, uy) = flow.u_coeffs(dofs, e);
                let u: f64 = ux.iter().zip(&vals).map(|(c, b)| c * b).sum();
                let v: f64 = uy.iter().zip(&vals).map(|(c, b)| c * b).sum();
                out.extend_from_slice(&[x as f32, y as f32, u as f32, v as f32]);
            }
        }
        out
    }

    /// One-line JSON summary: time, concentration range over element means,
    /// and the divergence residual.
    pub fn stats(&self) -> String {
        let conc = self.sim.current_conc();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in 0..self.sim.mesh.n_elements() {
            let mean = conc.c_coeffs(e)[0] * sqrt2;
            lo = lo.min(mean);
            hi = hi.max(mean);
        }
        let report = report_conservation(&self.sim, self.sim.time());
        format!(
            "{{\"t\":{:.6},\"c_min\":{:.4},\"c_max\":{:.4},\"div\":{:.3e}}}",
            self.sim.time(),
            lo,
            hi,
            report.l2_div_s.max(report.max_div_residual_d)
        )
    }
}

/// Permeability-field explorer: the heterogeneous field rasterized on a
/// log scale (or the constant field when `heterogeneous` is false).
#[wasm_bindgen]
pub fn permeability_rgba(width: u32, height: u32, heterogeneous: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity((width * height * 4) as usize);
    for j in 0..height {
        for i in 0..width {
            let x = (i as f64 + 0.5) / width as f64;
            let y = 1.0 - (j as f64 + 0.5) / height as f64;
            if y >= 0.5 {
                // Free-flow region: neutral gray.
                out.extend_from_slice(&[235, 238, 240, 255]);
                continue;
            }
            let kappa = if heterogeneous {
                sdhdg::problem::heterogeneous_permeability([x, y])
            } else {
                700.0
            };
            // Field range is roughly [100 - 700, 100 + 1400].
            let t = ((kappa.log10() - 1.5) / (3.2 - 1.5)).clamp(0.0, 1.0);
            out.extend_from_slice(&colormap(t));
        }
    }
    out
}

/// Quick manufactured convergence table (constant-coefficient scenario) for
/// the given velocity degree, as CSV text.
#[wasm_bindgen]
pub fn convergence_table(k_f: u32, levels: u32) -> String {
    let k_f = (k_f as usize).clamp(2, 3);
    let levels = (levels as usize).clamp(1, 3);
    let mut cfg = StudyConfig::new(StudyExample::Example1, k_f, 1.0, 1.0);
    cfg.resolutions = (0..levels).map(|i| 2usize << i).collect();
    cfg.conservation = false;
    match convergence_study(&cfg) {
        Ok(result) => result.to_csv(),
        Err(e) => format!("error: {e}"),
    }
}

/// Locate the element and reference coordinates of a domain point.
fn locate(mesh: &Mesh, x: f64, y: f64) -> (usize, [f64; 2]) {
    let n = mesh.n;
    let eps = 1e-12;
    let xc = x.clamp(0.0, 1.0 - eps);
    let yc = y.clamp(0.0, 1.0 - eps);
    let i = ((xc * n as f64) as usize).min(n - 1);
    let j = ((yc * n as f64) as usize).min(n - 1);
    let fx = xc * n as f64 - i as f64;
    let fy = yc * n as f64 - j as f64;
    let lower = fy <= fx;
    let e = 2 * (j * n + i) + if lower { 0 } else { 1 };
    debug_assert_eq!(
        mesh.tris[e].class,
        if lower { TriClass::Lower } else { TriClass::Upper }
    );
    let xi = if lower { [fx - fy, fy] } else { [fx, fy - fx] };
    (e, xi)
}

fn rasterize(
    mesh: &Mesh,
    width: u32,
    height: u32,
    mut shade: impl FnMut(usize, [f64; 2]) -> [u8; 4],
) -> Vec<u8> {
    let mut out = Vec::with_capacity((width * height * 4) as usize);
    for j in 0..height {
        for i in 0..width {
            let x = (i as f64 + 0.5) / width as f64;
            let y = 1.0 - (j as f64 + 0.5) / height as f64;
            let (e, xi) = locate(mesh, x, y);
            out.extend_from_slice(&shade(e, xi));
        }
    }
    out
}

/// Five-stop sequential colormap on [0, 1].
fn colormap(t: f64) -> [u8; 4] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t as usize).min(3);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    [rgb[0], rgb[1], rgb[2], 255]
}
