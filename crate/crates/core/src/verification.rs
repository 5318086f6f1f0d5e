//! Manufactured solutions, source synthesis, error norms and convergence
//! studies.
//!
//! The manufactured fields (with s1 = sin(pi x1 + t), c1 = cos(pi x1 + t),
//! E = exp((x2 + t)/2)):
//!
//!   u_s = (-s1 E / (2 pi^2), c1 E / pi),      divergence free,
//!   u_d = (-2 s1 E,          c1 E / pi),
//!   p_s = (kappa mu(c) - 2) / (kappa pi) c1 E,
//!   p_d = -2 / (kappa pi) c1 E,
//!   c   = sin(2 pi (x1 - t)) cos(2 pi (x2 - t)),
//!
//! satisfy the interface conditions exactly (normal velocity, normal stress
//! with the viscosity evaluated at the local concentration, the friction law
//! with alpha = (1 + 4 pi^2) sqrt(kappa) / 2, concentration and its flux).
//! All first and second space derivatives and the time derivatives are hand
//! coded; `synthesize_sources` validates them against finite differences of
//! the value functions and then assembles the volumetric sources that make
//! the coupled system hold, erring out on any mismatch.

use crate::fem::projection::{divergence_coefficients, l2_project_element};
use crate::fem::tables::{class_index, MeshTables};
use crate::flow::{dot, mass_conservation_report, ConservationReport, FlowState};
use crate::mesh::{Mesh, Region};
use crate::problem::{
    BcSet, DispersionModel, Discretization, FlowBc, KappaModel, MeanConstraint, MuModel,
    ProblemConfig, TransportBc,
};
use crate::timeloop::{Simulation, TimeGrid, TimeScheme};
use crate::transport::ConcState;
use crate::{Error, Result};
use std::f64::consts::PI;
use std::sync::Arc;

/// Manufactured solution of the coupled system on the split unit square.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub kappa: f64,
    pub mu: MuModel,
    /// Slip coefficient making the friction interface law exact.
    pub alpha: f64,
}

/// Constant-viscosity variant (one-way coupling).
pub fn example1_exact(kappa: f64, mu: f64) -> ManufacturedSolution {
    ManufacturedSolution {
        kappa,
        mu: MuModel::Constant(mu),
        alpha: 0.5 * (1.0 + 4.0 * PI * PI) * kappa.sqrt(),
    }
}

/// Quarter-power viscosity variant (fully coupled).
pub fn example2_exact(kappa: f64, mu0: f64, mu1: f64) -> ManufacturedSolution {
    ManufacturedSolution {
        kappa,
        mu: MuModel::QuarterPower { mu0, mu1 },
        alpha: 0.5 * (1.0 + 4.0 * PI * PI) * kappa.sqrt(),
    }
}

impl ManufacturedSolution {
    pub fn u(&self, x: [f64; 2], t: f64, region: Region) -> [f64; 2] {
        let (s1, c1, e) = scf(x, t);
        match region {
            Region::Stokes => [-s1 * e / (2.0 * PI * PI), c1 * e / PI],
            Region::Darcy => [-2.0 * s1 * e, c1 * e / PI],
        }
    }

    pub fn du_dt(&self, x: [f64; 2], t: f64, region: Region) -> [f64; 2] {
        let (s1, c1, e) = scf(x, t);
        let u2 = (-s1 + 0.5 * c1) * e / PI;
        match region {
            Region::Stokes => [-(c1 + 0.5 * s1) * e / (2.0 * PI * PI), u2],
            Region::Darcy => [-2.0 * (c1 + 0.5 * s1) * e, u2],
        }
    }

    /// [[du1/dx, du1/dy], [du2/dx, du2/dy]].
    pub fn grad_u(&self, x: [f64; 2], t: f64, region: Region) -> [[f64; 2]; 2] {
        let (s1, c1, e) = scf(x, t);
        let row2 = [-s1 * e, c1 * e / (2.0 * PI)];
        match region {
            Region::Stokes => [[-c1 * e / (2.0 * PI), -s1 * e / (4.0 * PI * PI)], row2],
            Region::Darcy => [[-2.0 * PI * c1 * e, -s1 * e], row2],
        }
    }

    /// Second derivatives (xx, xy, yy) of each velocity component.
    pub fn hess_u(&self, x: [f64; 2], t: f64, region: Region) -> [[f64; 3]; 2] {
        let (s1, c1, e) = scf(x, t);
        let comp2 = [-PI * c1 * e, -0.5 * s1 * e, c1 * e / (4.0 * PI)];
        match region {
            Region::Stokes => [
                [0.5 * s1 * e, -c1 * e / (4.0 * PI), -s1 * e / (8.0 * PI * PI)],
                comp2,
            ],
            Region::Darcy => [[2.0 * PI * PI * s1 * e, -PI * c1 * e, -0.5 * s1 * e], comp2],
        }
    }

    pub fn div_u(&self, x: [f64; 2], t: f64, region: Region) -> f64 {
        let (_, c1, e) = scf(x, t);
        match region {
            Region::Stokes => 0.0,
            Region::Darcy => (1.0 / (2.0 * PI) - 2.0 * PI) * c1 * e,
        }
    }

    pub fn p(&self, x: [f64; 2], t: f64, region: Region) -> f64 {
        let (_, c1, e) = scf(x, t);
        match region {
            Region::Stokes => {
                let mu = self.mu.eval(self.c(x, t));
                (self.kappa * mu - 2.0) / (self.kappa * PI) * c1 * e
            }
            Region::Darcy => -2.0 / (self.kappa * PI) * c1 * e,
        }
    }

    pub fn grad_p(&self, x: [f64; 2], t: f64, region: Region) -> [f64; 2] {
        let (s1, c1, e) = scf(x, t);
        let base = [-PI * s1 * e, 0.5 * c1 * e];
        match region {
            Region::Stokes => {
                let c = self.c(x, t);
                let gc = self.grad_c(x, t);
                let coef = (self.kappa * self.mu.eval(c) - 2.0) / (self.kappa * PI);
                let dcoef = self.mu.deriv(c) / PI;
                [
                    coef * base[0] + dcoef * gc[0] * c1 * e,
                    coef * base[1] + dcoef * gc[1] * c1 * e,
                ]
            }
            Region::Darcy => {
                let coef = -2.0 / (self.kappa * PI);
                [coef * base[0], coef * base[1]]
            }
        }
    }

    pub fn c(&self, x: [f64; 2], t: f64) -> f64 {
        (2.0 * PI * (x[0] - t)).sin() * (2.0 * PI * (x[1] - t)).cos()
    }

    pub fn dc_dt(&self, x: [f64; 2], t: f64) -> f64 {
        let (s1, c1) = ((2.0 * PI * (x[0] - t)).sin(), (2.0 * PI * (x[0] - t)).cos());
        let (s2, c2) = ((2.0 * PI * (x[1] - t)).sin(), (2.0 * PI * (x[1] - t)).cos());
        -2.0 * PI * c1 * c2 + 2.0 * PI * s1 * s2
    }

    pub fn grad_c(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let (s1, c1) = ((2.0 * PI * (x[0] - t)).sin(), (2.0 * PI * (x[0] - t)).cos());
        let (s2, c2) = ((2.0 * PI * (x[1] - t)).sin(), (2.0 * PI * (x[1] - t)).cos());
        [2.0 * PI * c1 * c2, -2.0 * PI * s1 * s2]
    }

    /// (cxx, cxy, cyy).
    pub fn hess_c(&self, x: [f64; 2], t: f64) -> [f64; 3] {
        let (s1, c1) = ((2.0 * PI * (x[0] - t)).sin(), (2.0 * PI * (x[0] - t)).cos());
        let (s2, c2) = ((2.0 * PI * (x[1] - t)).sin(), (2.0 * PI * (x[1] - t)).cos());
        let f = 4.0 * PI * PI;
        [-f * s1 * c2, -f * c1 * s2, -f * s1 * c2]
    }

    /// Region by vertical position (the interface belongs to Stokes; only
    /// normal components, which coincide, are ever sampled there).
    pub fn region_of(x: [f64; 2]) -> Region {
        if x[1] >= 0.5 { Region::Stokes } else { Region::Darcy }
    }

    /// Verify the interface conditions at sample points; returns the largest
    /// absolute residual over all five conditions.
    pub fn interface_residual(&self, dispersion: &DispersionModel, phi: f64) -> f64 {
        let mut worst = 0.0f64;
        let n = [0.0, -1.0]; // Stokes to Darcy
        let tau = [1.0, 0.0];
        for i in 0..17 {
            for t in [0.0, 0.037, 0.1] {
                let x = [i as f64 / 16.0, 0.5];
                let us = self.u(x, t, Region::Stokes);
                let ud = self.u(x, t, Region::Darcy);
                // Normal velocity continuity.
                worst = worst.max(((us[0] - ud[0]) * n[0] + (us[1] - ud[1]) * n[1]).abs());
                // Normal stress: p_s - 2 mu (eps(u_s) n).n = p_d.
                let g = self.grad_u(x, t, Region::Stokes);
                let eps = [
                    [g[0][0], 0.5 * (g[0][1] + g[1][0])],
                    [0.5 * (g[0][1] + g[1][0]), g[1][1]],
                ];
                let epsn = [
                    eps[0][0] * n[0] + eps[0][1] * n[1],
                    eps[1][0] * n[0] + eps[1][1] * n[1],
                ];
                let mu = self.mu.eval(self.c(x, t));
                let lhs = self.p(x, t, Region::Stokes)
                    - 2.0 * mu * (epsn[0] * n[0] + epsn[1] * n[1]);
                worst = worst.max((lhs - self.p(x, t, Region::Darcy)).abs());
                // Friction law: -2 (eps(u_s) n).tau = gamma u_s.tau.
                let gamma = self.alpha / self.kappa.sqrt();
                let slip = -2.0 * (epsn[0] * tau[0] + epsn[1] * tau[1])
                    - gamma * (us[0] * tau[0] + us[1] * tau[1]);
                worst = worst.max(slip.abs());
                // Concentration continuity is trivial (one global c); flux
                // continuity of D grad c . n across the interface.
                let gc = self.grad_c(x, t);
                let ds = crate::problem::dispersion_tensor(dispersion, Region::Stokes, us, phi);
                let dd = crate::problem::dispersion_tensor(dispersion, Region::Darcy, ud, phi);
                let fs = (ds[0][0] * gc[0] + ds[0][1] * gc[1]) * n[0]
                    + (ds[1][0] * gc[0] + ds[1][1] * gc[1]) * n[1];
                let fd = (dd[0][0] * gc[0] + dd[0][1] * gc[1]) * n[0]
                    + (dd[1][0] * gc[0] + dd[1][1] * gc[1]) * n[1];
                worst = worst.max((fs - fd).abs());
            }
        }
        worst
    }

    /// Integral of the exact pressure over the domain (tensor Gauss rule per
    /// region; the integrand is entire).
    pub fn pressure_mean_target(&self, t: f64) -> f64 {
        let n = 24;
        let rule = crate::fem::quadrature::edge_quadrature(2 * n - 1).expect("supported degree");
        let mut total = 0.0;
        for (region, y0, y1) in [(Region::Stokes, 0.5, 1.0), (Region::Darcy, 0.0, 0.5)] {
            for (xi, wi) in rule.points.iter().zip(&rule.weights) {
                for (yj, wj) in rule.points.iter().zip(&rule.weights) {
                    let x = [*xi, y0 + (y1 - y0) * yj];
                    total += wi * wj * (y1 - y0) * self.p(x, t, region);
                }
            }
        }
        total
    }
}

fn scf(x: [f64; 2], t: f64) -> (f64, f64, f64) {
    let arg = PI * x[0] + t;
    (arg.sin(), arg.cos(), ((x[1] + t) / 2.0).exp())
}

/// Outward normal of the unit square at a boundary point.
fn boundary_normal(x: [f64; 2]) -> [f64; 2] {
    let tol = 1e-9;
    if x[0] < tol {
        [-1.0, 0.0]
    } else if x[0] > 1.0 - tol {
        [1.0, 0.0]
    } else if x[1] < tol {
        [0.0, -1.0]
    } else {
        [0.0, 1.0]
    }
}

/// Build a full problem configuration whose solution is `exact`:
/// volumetric sources for the momentum, Darcy, mass and transport equations,
/// Dirichlet-type boundary data on the whole boundary, and the exact
/// pressure mean as constraint target. The hand-coded derivatives are
/// cross-checked against finite differences of the value functions; any
/// mismatch beyond tolerance is a hard error.
pub fn synthesize_sources(
    exact: &ManufacturedSolution,
    dispersion: DispersionModel,
    phi: f64,
) -> Result<ProblemConfig> {
    validate_derivatives(exact)?;
    validate_pde_residuals(exact, &dispersion, phi)?;
    let iface = exact.interface_residual(&dispersion, phi);
    if iface > 1e-12 {
        return Err(Error::SelfCheck(format!(
            "manufactured solution violates an interface condition by {iface:.3e}"
        )));
    }

    let ex = exact.clone();
    let f_s: crate::problem::BodyForceFn = Arc::new(move |x, t, _c| {
        let r = Region::Stokes;
        let dudt = ex.du_dt(x, t, r);
        let gp = ex.grad_p(x, t, r);
        let h = ex.hess_u(x, t, r);
        let g = ex.grad_u(x, t, r);
        let c = ex.c(x, t);
        let mu = ex.mu.eval(c);
        let dmu = ex.mu.deriv(c);
        let gc = ex.grad_c(x, t);
        let gmu = [dmu * gc[0], dmu * gc[1]];
        // div(2 mu eps(u)) = mu lap(u) + 2 eps(u) grad(mu)  (div u = 0).
        let lap = [h[0][0] + h[0][2], h[1][0] + h[1][2]];
        let eps = [
            [g[0][0], 0.5 * (g[0][1] + g[1][0])],
            [0.5 * (g[0][1] + g[1][0]), g[1][1]],
        ];
        [
            dudt[0] + gp[0] - mu * lap[0] - 2.0 * (eps[0][0] * gmu[0] + eps[0][1] * gmu[1]),
            dudt[1] + gp[1] - mu * lap[1] - 2.0 * (eps[1][0] * gmu[0] + eps[1][1] * gmu[1]),
        ]
    });

    // The Darcy equation needs K^{-1}(c_exact) f_d = K^{-1}(c_exact) u + grad p
    // at the exact solution. Defining f_d(x, t, c) := K(c) G with the pure
    // space-time field G := K^{-1}(c_exact) u + grad p satisfies that and
    // makes the assembled load K^{-1}(c_lag) f_d(c_lag) = G independent of
    // the concentration lag, so the study measures spatial error only.
    let ex = exact.clone();
    let f_d: crate::problem::BodyForceFn = Arc::new(move |x, t, c| {
        let r = Region::Darcy;
        let u = ex.u(x, t, r);
        let gp = ex.grad_p(x, t, r);
        let mu_ex = ex.mu.eval(ex.c(x, t));
        let g = [
            mu_ex / ex.kappa * u[0] + gp[0],
            mu_ex / ex.kappa * u[1] + gp[1],
        ];
        let k_c = ex.kappa / ex.mu.eval(c);
        [k_c * g[0], k_c * g[1]]
    });

    let ex = exact.clone();
    let g_p: crate::problem::ScalarFn = Arc::new(move |x, t| -ex.div_u(x, t, Region::Darcy));

    let ex = exact.clone();
    let disp = dispersion.clone();
    let transport_source: crate::problem::ScalarFn = Arc::new(move |x, t| {
        let r = ManufacturedSolution::region_of(x);
        let phi_r = match r {
            Region::Stokes => 1.0,
            Region::Darcy => phi,
        };
        let u = ex.u(x, t, r);
        let gc = ex.grad_c(x, t);
        // phi c_t + u . grad c - div(D grad c); the conservative advection
        // extra c div u cancels against the production term c g_p.
        phi_r * ex.dc_dt(x, t) + u[0] * gc[0] + u[1] * gc[1]
            - div_dispersion_flux(&ex, &disp, x, t, r)
    });

    let ex = exact.clone();
    let dirichlet_s: crate::problem::VectorFn =
        Arc::new(move |x, t| ex.u(x, t, Region::Stokes));
    let ex = exact.clone();
    let normal_d: crate::problem::ScalarFn = Arc::new(move |x, t| {
        let u = ex.u(x, t, Region::Darcy);
        let n = boundary_normal(x);
        u[0] * n[0] + u[1] * n[1]
    });
    let ex = exact.clone();
    let c_data: crate::problem::ScalarFn = Arc::new(move |x, t| ex.c(x, t));

    let bc = BcSet {
        s1: FlowBc::VelocityDirichlet(dirichlet_s.clone()),
        s2: FlowBc::VelocityDirichlet(dirichlet_s.clone()),
        s3: FlowBc::VelocityDirichlet(dirichlet_s),
        d1: FlowBc::NormalFlux(normal_d.clone()),
        d2: FlowBc::NormalFlux(normal_d),
        transport: TransportBc::Dirichlet(c_data),
    };

    let ex = exact.clone();
    let mean = MeanConstraint::Target(Arc::new(move |t| ex.pressure_mean_target(t)));

    let ex = exact.clone();
    let u0: crate::problem::SpatialVectorFn =
        Arc::new(move |x| ex.u(x, 0.0, ManufacturedSolution::region_of(x)));
    let ex = exact.clone();
    let c0: crate::problem::SpatialScalarFn = Arc::new(move |x| ex.c(x, 0.0));

    Ok(ProblemConfig {
        mu: exact.mu.clone(),
        kappa: KappaModel::Constant(exact.kappa),
        phi,
        alpha: exact.alpha,
        dispersion,
        f_s: Some(f_s),
        f_d: Some(f_d),
        g_i: None,
        g_p: Some(g_p),
        c_inj: None,
        transport_source: Some(transport_source),
        bc,
        u0,
        c0,
        mean_constraint: mean,
        penalty_weight: crate::problem::DiffPenaltyWeight::NormalNormal,
    })
}

/// div(D(u) grad c) with the analytic derivatives, per dispersion model.
fn div_dispersion_flux(
    ex: &ManufacturedSolution,
    model: &DispersionModel,
    x: [f64; 2],
    t: f64,
    region: Region,
) -> f64 {
    let gc = ex.grad_c(x, t);
    let hc = ex.hess_c(x, t);
    match model {
        DispersionModel::ConstantMatrix { d_s, d_d } => {
            let d = match region {
                Region::Stokes => d_s,
                Region::Darcy => d_d,
            };
            d[0][0] * hc[0] + 2.0 * d[0][1] * hc[1] + d[1][1] * hc[2]
        }
        DispersionModel::VelocityDiagonal => {
            let u = ex.u(x, t, region);
            let gu = ex.grad_u(x, t, region);
            2.0 * u[0] * gu[0][0] * gc[0]
                + (1.0 + u[0] * u[0]) * hc[0]
                + 2.0 * u[1] * gu[1][1] * gc[1]
                + (1.0 + u[1] * u[1]) * hc[2]
        }
        DispersionModel::Bear { .. } => {
            unimplemented!("manufactured sources are not provided for the Bear model")
        }
    }
}

/// Cross-check every hand-coded derivative against central differences of
/// the value functions.
fn validate_derivatives(ex: &ManufacturedSolution) -> Result<()> {
    let pts = [
        [0.13, 0.77],
        [0.61, 0.93],
        [0.88, 0.56],
        [0.13, 0.27],
        [0.61, 0.43],
        [0.88, 0.06],
    ];
    let times = [0.0, 0.043, 0.1];
    let h = 1e-5;
    let check = |name: &str, got: f64, fd: f64, scale: f64| -> Result<()> {
        if (got - fd).abs() > 1e-6 * scale.max(1.0) {
            return Err(Error::SelfCheck(format!(
                "derivative {name}: analytic {got:.9e} vs finite-difference {fd:.9e}"
            )));
        }
        Ok(())
    };
    for &x in &pts {
        let region = ManufacturedSolution::region_of(x);
        for &t in &times {
            // Velocity derivatives.
            for comp in 0..2 {
                let ut = ex.du_dt(x, t, region)[comp];
                let fd = (ex.u(x, t + h, region)[comp] - ex.u(x, t - h, region)[comp]) / (2.0 * h);
                check("du/dt", ut, fd, ut.abs())?;
                let g = ex.grad_u(x, t, region)[comp];
                for d in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[d] += h;
                    xm[d] -= h;
                    let fd = (ex.u(xp, t, region)[comp] - ex.u(xm, t, region)[comp]) / (2.0 * h);
                    check("grad u", g[d], fd, g[d].abs())?;
                }
                // Second derivatives via second differences.
                let hs = ex.hess_u(x, t, region)[comp];
                let fd_xx = second_diff(|p| ex.u(p, t, region)[comp], x, 0);
                let fd_yy = second_diff(|p| ex.u(p, t, region)[comp], x, 1);
                let fd_xy = mixed_diff(|p| ex.u(p, t, region)[comp], x);
                check("u_xx", hs[0], fd_xx, hs[0].abs().max(10.0))?;
                check("u_xy", hs[1], fd_xy, hs[1].abs().max(10.0))?;
                check("u_yy", hs[2], fd_yy, hs[2].abs().max(10.0))?;
            }
            // Pressure gradient (kappa-scaled fields can be huge or tiny).
            let gp = ex.grad_p(x, t, region);
            for d in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fd = (ex.p(xp, t, region) - ex.p(xm, t, region)) / (2.0 * h);
                check("grad p", gp[d], fd, gp[d].abs().max(1.0 / ex.kappa))?;
            }
            // Concentration derivatives.
            let ct = ex.dc_dt(x, t);
            let fd = (ex.c(x, t + h) - ex.c(x, t - h)) / (2.0 * h);
            check("dc/dt", ct, fd, ct.abs().max(1.0))?;
            let gc = ex.grad_c(x, t);
            for d in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fd = (ex.c(xp, t) - ex.c(xm, t)) / (2.0 * h);
                check("grad c", gc[d], fd, gc[d].abs().max(1.0))?;
            }
            let hc = ex.hess_c(x, t);
            check("c_xx", hc[0], second_diff(|p| ex.c(p, t), x, 0), 40.0)?;
            check("c_xy", hc[1], mixed_diff(|p| ex.c(p, t), x), 40.0)?;
            check("c_yy", hc[2], second_diff(|p| ex.c(p, t), x, 1), 40.0)?;
        }
    }
    Ok(())
}

/// Independent residual check of the full PDE operators: fluxes built from
/// validated analytic gradients, outer divergence by finite differences.
fn validate_pde_residuals(
    ex: &ManufacturedSolution,
    dispersion: &DispersionModel,
    phi: f64,
) -> Result<()> {
    let pts = [[0.22, 0.81], [0.71, 0.64], [0.31, 0.18], [0.66, 0.42]];
    let times = [0.013, 0.09];
    let h = 1e-4;
    for &x in &pts {
        let region = ManufacturedSolution::region_of(x);
        for &t in &times {
            // Mass: -div u = g_p - g_i (zero in Stokes).
            let div_fd = {
                let mut d = 0.0;
                for comp in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[comp] += h;
                    xm[comp] -= h;
                    d += (ex.u(xp, t, region)[comp] - ex.u(xm, t, region)[comp]) / (2.0 * h);
                }
                d
            };
            let g_m = -ex.div_u(x, t, region);
            let scale = 10.0;
            if (-div_fd - g_m).abs() > 1e-6 * scale {
                return Err(Error::SelfCheck(format!(
                    "mass residual at {x:?}, t = {t}: {:.3e}",
                    (-div_fd - g_m).abs()
                )));
            }

            // Transport: phi c_t + div(c u - D grad c) + chi_d c g_p = source
            // (g_i = 0). Flux uses analytic grad c; divergence by FD.
            let flux = |p: [f64; 2]| -> [f64; 2] {
                let r = ManufacturedSolution::region_of(p);
                let u = ex.u(p, t, r);
                let gc = ex.grad_c(p, t);
                let d = crate::problem::dispersion_tensor(dispersion, r, u, phi);
                [
                    ex.c(p, t) * u[0] - d[0][0] * gc[0] - d[0][1] * gc[1],
                    ex.c(p, t) * u[1] - d[1][0] * gc[0] - d[1][1] * gc[1],
                ]
            };
            let mut div_flux = 0.0;
            for comp in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[comp] += h;
                xm[comp] -= h;
                div_flux += (flux(xp)[comp] - flux(xm)[comp]) / (2.0 * h);
            }
            let phi_r = match region {
                Region::Stokes => 1.0,
                Region::Darcy => phi,
            };
            let g_p = if region == Region::Darcy { g_m } else { 0.0 };
            let lhs = phi_r * ex.dc_dt(x, t) + div_flux + ex.c(x, t) * g_p;
            let src = {
                let u = ex.u(x, t, region);
                let gc = ex.grad_c(x, t);
                phi_r * ex.dc_dt(x, t) + u[0] * gc[0] + u[1] * gc[1]
                    - div_dispersion_flux(ex, dispersion, x, t, region)
            };
            // lhs includes c div u + c g_p which the source absorbs exactly.
            let scale = lhs.abs().max(src.abs()).max(10.0);
            if (lhs - src).abs() > 2e-5 * scale {
                return Err(Error::SelfCheck(format!(
                    "transport residual at {x:?}, t = {t}: {:.3e} (scale {scale:.1e})",
                    (lhs - src).abs()
                )));
            }

            // Momentum (Stokes): u_t - div(2 mu eps(u)) + grad p = f_s, with
            // the stress built from analytic gradients and FD divergence.
            if region == Region::Stokes {
                let stress = |p: [f64; 2]| -> [[f64; 2]; 2] {
                    let g = ex.grad_u(p, t, Region::Stokes);
                    let mu = ex.mu.eval(ex.c(p, t));
                    let e12 = 0.5 * (g[0][1] + g[1][0]);
                    [
                        [2.0 * mu * g[0][0], 2.0 * mu * e12],
                        [2.0 * mu * e12, 2.0 * mu * g[1][1]],
                    ]
                };
                for comp in 0..2 {
                    let mut div_sigma = 0.0;
                    for d in 0..2 {
                        let mut xp = x;
                        let mut xm = x;
                        xp[d] += h;
                        xm[d] -= h;
                        div_sigma += (stress(xp)[comp][d] - stress(xm)[comp][d]) / (2.0 * h);
                    }
                    let lhs = ex.du_dt(x, t, Region::Stokes)[comp] - div_sigma
                        + ex.grad_p(x, t, Region::Stokes)[comp];
                    // Reconstruct f_s from the analytic pieces.
                    let hss = ex.hess_u(x, t, Region::Stokes);
                    let g = ex.grad_u(x, t, Region::Stokes);
                    let c = ex.c(x, t);
                    let mu = ex.mu.eval(c);
                    let dmu = ex.mu.deriv(c);
                    let gc = ex.grad_c(x, t);
                    let lap = [hss[0][0] + hss[0][2], hss[1][0] + hss[1][2]];
                    let eps = [
                        [g[0][0], 0.5 * (g[0][1] + g[1][0])],
                        [0.5 * (g[0][1] + g[1][0]), g[1][1]],
                    ];
                    let f = ex.du_dt(x, t, Region::Stokes)[comp]
                        + ex.grad_p(x, t, Region::Stokes)[comp]
                        - mu * lap[comp]
                        - 2.0 * (eps[comp][0] * dmu * gc[0] + eps[comp][1] * dmu * gc[1]);
                    let scale = lhs.abs().max(f.abs()).max(10.0);
                    if (lhs - f).abs() > 2e-5 * scale {
                        return Err(Error::SelfCheck(format!(
                            "momentum residual at {x:?}, t = {t}, comp {comp}: {:.3e}",
                            (lhs - f).abs()
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn second_diff(f: impl Fn([f64; 2]) -> f64, x: [f64; 2], d: usize) -> f64 {
    let h = 1e-4;
    let mut xp = x;
    let mut xm = x;
    xp[d] += h;
    xm[d] -= h;
    (f(xp) - 2.0 * f(x) + f(xm)) / (h * h)
}

fn mixed_diff(f: impl Fn([f64; 2]) -> f64, x: [f64; 2]) -> f64 {
    let h = 1e-4;
    let pp = f([x[0] + h, x[1] + h]);
    let pm = f([x[0] + h, x[1] - h]);
    let mp = f([x[0] - h, x[1] + h]);
    let mm = f([x[0] - h, x[1] - h]);
    (pp - pm - mp + mm) / (4.0 * h * h)
}

/// L2 errors and divergence diagnostics of a discrete pair against the
/// manufactured solution at time `t`.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub err_u_s: f64,
    pub err_p_s: f64,
    pub err_u_d: f64,
    pub err_p_d: f64,
    pub err_c: f64,
    /// ||div u_h||_{Omega^s}.
    pub div_s: f64,
    /// ||Pi_Q(div(u_h - u))||_{Omega^d}.
    pub div_d_proj: f64,
}

pub fn compute_errors(
    mesh: &Mesh,
    tables: &MeshTables,
    flow_dofs: &crate::fem::dofmap::FlowDofs,
    flow: &FlowState,
    conc: &ConcState,
    exact: &ManufacturedSolution,
    t: f64,
) -> ErrorReport {
    let su = tables.cell_space(flow_dofs.k);
    let sp = tables.cell_space(flow_dofs.k - 1);
    let scs = tables.cell_space(conc.k);
    let dim_u = flow_dofs.dim_u;
    let dim_p = flow_dofs.dim_p;
    let nq = tables.vol_rule.points.len();

    let mut e_u = [0.0f64; 2];
    let mut e_p = [0.0f64; 2];
    let mut e_c = 0.0f64;
    let mut div_s2 = 0.0f64;
    let mut div_d_proj2 = 0.0f64;

    for (e, tri) in mesh.tris.iter().enumerate() {
        let ci = class_index(tri.class);
        let vol = &su.vol[ci];
        let vol_p = &sp.vol[ci];
        let vol_c = &scs.vol[ci];
        let v0 = mesh.vertices[tri.verts[0]];
        let (ux, uy) = flow.u_coeffs(flow_dofs, e);
        let pc = flow.p_coeffs(flow_dofs, e);
        let cc = conc.c_coeffs(e);
        let ridx = match tri.region {
            Region::Stokes => 0,
            Region::Darcy => 1,
        };

        for q in 0..nq {
            let w = vol.weights[q];
            let x = [v0[0] + vol.offsets[q][0], v0[1] + vol.offsets[q][1]];
            let uvals = &vol.vals[q * dim_u..(q + 1) * dim_u];
            let pvals = &vol_p.vals[q * dim_p..(q + 1) * dim_p];
            let cvals = &vol_c.vals[q * conc.dim_c..(q + 1) * conc.dim_c];
            let uh = [dot(ux, uvals), dot(uy, uvals)];
            let ue = exact.u(x, t, tri.region);
            e_u[ridx] += w * ((uh[0] - ue[0]).powi(2) + (uh[1] - ue[1]).powi(2));
            let ph = dot(pc, pvals);
            e_p[ridx] += w * (ph - exact.p(x, t, tri.region)).powi(2);
            let ch = dot(cc, cvals);
            e_c += w * (ch - exact.c(x, t)).powi(2);
        }

        // Divergence diagnostics.
        let geom = mesh.element_geometry(e).expect("valid element");
        let mut cell_u = vec![0.0; 2 * dim_u];
        cell_u[..dim_u].copy_from_slice(ux);
        cell_u[dim_u..].copy_from_slice(uy);
        let div_coefs =
            divergence_coefficients(&cell_u, &geom, &su.basis, &sp.basis, &tables.vol_rule);
        match tri.region {
            Region::Stokes => {
                div_s2 += tables.det_jac * div_coefs.iter().map(|v| v * v).sum::<f64>();
            }
            Region::Darcy => {
                let exact_div =
                    l2_project_element(&|x| exact.div_u(x, t, Region::Darcy), &geom, &sp.basis, &tables.vol_rule);
                let diff2: f64 = div_coefs
                    .iter()
                    .zip(&exact_div)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                div_d_proj2 += tables.det_jac * diff2;
            }
        }
    }

    ErrorReport {
        err_u_s: e_u[0].sqrt(),
        err_p_s: e_p[0].sqrt(),
        err_u_d: e_u[1].sqrt(),
        err_p_d: e_p[1].sqrt(),
        err_c: e_c.sqrt(),
        div_s: div_s2.sqrt(),
        div_d_proj: div_d_proj2.sqrt(),
    }
}

/// Which manufactured scenario a study runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyExample {
    /// Constant coefficients (one-way coupling).
    Example1,
    /// Quarter-power viscosity and velocity-dependent dispersion.
    Example2,
}

/// Inputs of a convergence study.
#[derive(Clone)]
pub struct StudyConfig {
    pub example: StudyExample,
    pub k_f: usize,
    pub kappa: f64,
    /// Viscosity for the constant-coefficient scenario.
    pub mu: f64,
    pub resolutions: Vec<usize>,
    pub scheme: TimeScheme,
    pub t_end: f64,
    pub condense: bool,
    /// Track per-step conservation maxima (costs one report per step).
    pub conservation: bool,
}

impl StudyConfig {
    pub fn new(example: StudyExample, k_f: usize, kappa: f64, mu: f64) -> StudyConfig {
        StudyConfig {
            example,
            k_f,
            kappa,
            mu,
            resolutions: vec![4, 8, 16],
            scheme: TimeScheme::Bdf3,
            t_end: 0.1,
            condense: true,
            conservation: true,
        }
    }

    /// The exact solution and problem data of this study.
    pub fn build_problem(&self) -> Result<(ManufacturedSolution, ProblemConfig)> {
        let (exact, dispersion) = match self.example {
            StudyExample::Example1 => (
                example1_exact(self.kappa, self.mu),
                DispersionModel::ConstantMatrix {
                    d_s: [[0.01, 0.005], [0.005, 0.02]],
                    d_d: [[0.01, 0.005], [0.005, 0.02]],
                },
            ),
            StudyExample::Example2 => (
                example2_exact(self.kappa, 0.9, 1.3),
                DispersionModel::VelocityDiagonal,
            ),
        };
        let problem = synthesize_sources(&exact, dispersion, 1.0)?;
        Ok((exact, problem))
    }

    /// Time step of the experiment schedule, 0.1 h^{k_f} / (k_f + 1).
    pub fn dt_for(&self, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        0.1 * h.powi(self.k_f as i32) / (self.k_f as f64 + 1.0)
    }
}

/// Result of one resolution.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub n: usize,
    pub h: f64,
    pub dofs: usize,
    pub errors: ErrorReport,
    /// Worst per-step conservation metrics over the whole run.
    pub conservation: Option<ConservationWorst>,
}

#[derive(Debug, Clone, Default)]
pub struct ConservationWorst {
    pub div_s: f64,
    pub div_residual_d: f64,
    pub data_scale_d: f64,
    pub jump_noninterface: f64,
    pub jump_interface: f64,
    pub jump_scale: f64,
}

impl ConservationWorst {
    pub fn absorb(&mut self, r: &ConservationReport) {
        self.div_s = self.div_s.max(r.l2_div_s);
        self.div_residual_d = self.div_residual_d.max(r.max_div_residual_d);
        self.data_scale_d = self.data_scale_d.max(r.data_scale_d);
        self.jump_noninterface = self.jump_noninterface.max(r.max_jump_noninterface);
        self.jump_interface = self.jump_interface.max(r.max_jump_interface);
        self.jump_scale = self.jump_scale.max(r.jump_scale);
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub config_summary: Vec<(String, String)>,
    pub rows: Vec<StudyRow>,
}

/// Run the full refinement chain of a study.
pub fn convergence_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let (exact, problem) = cfg.build_problem()?;
    let mut rows = Vec::new();
    for &n in &cfg.resolutions {
        let mesh = Mesh::structured(n)?;
        let mut disc = Discretization::new(cfg.k_f)?;
        disc.condense = cfg.condense;
        let dt = cfg.dt_for(n);
        let grid = TimeGrid::new(dt, cfg.t_end)?;
        let mut sim = Simulation::new(mesh, problem.clone(), disc, cfg.scheme, grid)?;
        sim.conservation_check = cfg.conservation;
        let mut worst = ConservationWorst::default();
        sim.run(|_, report| {
            if let Some(r) = &report.conservation {
                worst.absorb(r);
            }
            Ok(())
        })?;
        let errors = compute_errors(
            &sim.mesh,
            &sim.tables,
            &sim.flow.dofs,
            sim.current_flow(),
            sim.current_conc(),
            &exact,
            cfg.t_end,
        );
        let dofs = sim.flow.dofs.n_cell + sim.flow.layout.n_free;
        rows.push(StudyRow {
            n,
            h: 1.0 / n as f64,
            dofs,
            errors,
            conservation: cfg.conservation.then_some(worst),
        });
    }
    let config_summary = vec![
        ("example".into(), format!("{:?}", cfg.example)),
        ("k_f".into(), cfg.k_f.to_string()),
        ("k_c".into(), (cfg.k_f - 1).to_string()),
        ("kappa".into(), format!("{:e}", cfg.kappa)),
        ("mu".into(), format!("{:e}", cfg.mu)),
        ("scheme".into(), format!("{:?}", cfg.scheme)),
        ("t_end".into(), cfg.t_end.to_string()),
        ("dt_rule".into(), "0.1 h^k_f / (k_f + 1)".into()),
        ("condense".into(), cfg.condense.to_string()),
    ];
    Ok(StudyResult { config_summary, rows })
}

impl StudyResult {
    /// Observed rate log2(e_h / e_{h/2}) between consecutive rows; index 0
    /// has no rate.
    pub fn rates(&self, pick: impl Fn(&ErrorReport) -> f64) -> Vec<Option<f64>> {
        let mut out = vec![None; self.rows.len()];
        for i in 1..self.rows.len() {
            let e0 = pick(&self.rows[i - 1].errors);
            let e1 = pick(&self.rows[i].errors);
            if e0 > 0.0 && e1 > 0.0 {
                out[i] = Some((e0 / e1).log2());
            }
        }
        out
    }

    /// CSV with '#'-prefixed metadata lines and the fixed column schema.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config_summary {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s.push_str("# dofs = flow-system unknowns (cell + free facet)\n");
        s.push_str(
            "h,dofs,err_u_s,rate_u_s,err_p_s,rate_p_s,err_u_d,rate_u_d,err_p_d,rate_p_d,err_c,rate_c,div_s,div_d_proj\n",
        );
        let ru = self.rates(|e| e.err_u_s);
        let rps = self.rates(|e| e.err_p_s);
        let rud = self.rates(|e| e.err_u_d);
        let rpd = self.rates(|e| e.err_p_d);
        let rc = self.rates(|e| e.err_c);
        let fmt_rate = |r: Option<f64>| r.map_or("".to_string(), |v| format!("{v:.2}"));
        for (i, row) in self.rows.iter().enumerate() {
            let e = &row.errors;
            s.push_str(&format!(
                "{:.6e},{},{:.3e},{},{:.3e},{},{:.3e},{},{:.3e},{},{:.3e},{},{:.3e},{:.3e}\n",
                row.h,
                row.dofs,
                e.err_u_s,
                fmt_rate(ru[i]),
                e.err_p_s,
                fmt_rate(rps[i]),
                e.err_u_d,
                fmt_rate(rud[i]),
                e.err_p_d,
                fmt_rate(rpd[i]),
                e.err_c,
                fmt_rate(rc[i]),
                e.div_s,
                e.div_d_proj,
            ));
        }
        s
    }

    /// Console table in the familiar errors-and-rates layout.
    pub fn console_table(&self) -> String {
        let mut s = String::new();
        s.push_str("     h      dofs   err_u_s  rate   err_p_s  rate   err_u_d  rate   err_p_d  rate   err_c    rate\n");
        let ru = self.rates(|e| e.err_u_s);
        let rps = self.rates(|e| e.err_p_s);
        let rud = self.rates(|e| e.err_u_d);
        let rpd = self.rates(|e| e.err_p_d);
        let rc = self.rates(|e| e.err_c);
        let fr = |r: Option<f64>| r.map_or("  -- ".to_string(), |v| format!("{v:5.2}"));
        for (i, row) in self.rows.iter().enumerate() {
            let e = &row.errors;
            s.push_str(&format!(
                "1/{:<6} {:>7}  {:9.2e} {}  {:9.2e} {}  {:9.2e} {}  {:9.2e} {}  {:9.2e} {}\n",
                row.n,
                row.dofs,
                e.err_u_s,
                fr(ru[i]),
                e.err_p_s,
                fr(rps[i]),
                e.err_u_d,
                fr(rud[i]),
                e.err_p_d,
                fr(rpd[i]),
                e.err_c,
                fr(rc[i]),
            ));
        }
        s
    }
}

/// Problem data for the heterogeneous-permeability plume scenario: parabolic
/// inflow on the upper-left boundary, traction outflow on the upper right,
/// slip on top, impermeable lateral walls and a pressure condition on the
/// bottom; quarter-power viscosity, Bear dispersion, zero wells, an initial
/// contaminant blob and zero initial velocity.
pub fn example3_problem(heterogeneous: bool) -> ProblemConfig {
    let inflow: crate::problem::VectorFn =
        Arc::new(|x, _t| [x[1] * (1.5 - x[1]) / 5.0, 0.0]);
    let zero_traction: crate::problem::VectorFn = Arc::new(|_, _| [0.0, 0.0]);
    let zero_flux: crate::problem::ScalarFn = Arc::new(|_, _| 0.0);
    let bottom_pressure: crate::problem::ScalarFn = Arc::new(|_, _| -0.05);
    let bc = BcSet {
        s1: FlowBc::VelocityDirichlet(inflow),
        s2: FlowBc::Traction(zero_traction),
        s3: FlowBc::SlipSymmetry,
        d1: FlowBc::NormalFlux(zero_flux),
        d2: FlowBc::PressureTrace(bottom_pressure),
        transport: TransportBc::Natural,
    };
    let c0: crate::problem::SpatialScalarFn = Arc::new(|x| {
        let dx = x[0] - 0.2;
        let dy = x[1] - 0.7;
        if (dx * dx + dy * dy).sqrt() < 0.1 {
            0.95
        } else {
            0.05
        }
    });
    ProblemConfig {
        mu: MuModel::QuarterPower { mu0: 0.9, mu1: 1.3 },
        kappa: if heterogeneous {
            KappaModel::Heterogeneous
        } else {
            KappaModel::Constant(700.0)
        },
        phi: 0.4,
        alpha: 0.5,
        dispersion: DispersionModel::Bear { delta: 1e-6, d_m: 1e-5, d_l: 1e-5, d_t: 1e-5 },
        f_s: None,
        f_d: None,
        g_i: None,
        g_p: None,
        c_inj: None,
        transport_source: None,
        bc,
        u0: Arc::new(|_| [0.0, 0.0]),
        c0,
        mean_constraint: MeanConstraint::Off,
        penalty_weight: crate::problem::DiffPenaltyWeight::NormalNormal,
    }
}

/// Conservation summary of a full simulation run (used by scenario drivers).
pub fn report_conservation(sim: &Simulation, t: f64) -> ConservationReport {
    mass_conservation_report(
        &sim.mesh,
        &sim.tables,
        &sim.flow.dofs,
        &sim.problem,
        sim.current_flow(),
        t,
    )
}
