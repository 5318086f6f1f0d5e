//! Physical coefficients, boundary conditions and run parameters.
//!
//! Concentration-dependent coefficients (viscosity, body forces) take the
//! lagged concentration value; space-time data takes (x, t). Permeability is
//! scalar-valued times the identity, which covers all shipped scenarios.

use crate::mesh::{FacetKind, Region};
use crate::{Error, Result};
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn([f64; 2], f64) -> [f64; 2] + Send + Sync>;
/// Body force as a function of (x, t, c).
pub type BodyForceFn = Arc<dyn Fn([f64; 2], f64, f64) -> [f64; 2] + Send + Sync>;
pub type SpatialScalarFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type SpatialVectorFn = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Viscosity as a function of concentration.
#[derive(Clone)]
pub enum MuModel {
    Constant(f64),
    /// Quarter-power mixing rule mu0 [ (mu0/mu1)^{1/4} c + (1 - c) ]^{-4}.
    QuarterPower { mu0: f64, mu1: f64 },
}

impl MuModel {
    pub fn eval(&self, c: f64) -> f64 {
        match self {
            MuModel::Constant(mu) => *mu,
            MuModel::QuarterPower { mu0, mu1 } => {
                let r = (mu0 / mu1).powf(0.25);
                let b = r * c + (1.0 - c);
                mu0 * b.powi(-4)
            }
        }
    }

    /// d mu / d c.
    pub fn deriv(&self, c: f64) -> f64 {
        match self {
            MuModel::Constant(_) => 0.0,
            MuModel::QuarterPower { mu0, mu1 } => {
                let r = (mu0 / mu1).powf(0.25);
                let b = r * c + (1.0 - c);
                -4.0 * mu0 * (r - 1.0) * b.powi(-5)
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MuModel::Constant(_))
    }
}

/// Scalar permeability field (kappa times the identity).
#[derive(Clone)]
pub enum KappaModel {
    Constant(f64),
    /// Heterogeneous sinusoidal field used by the plume scenario.
    Heterogeneous,
    Custom(SpatialScalarFn),
}

impl KappaModel {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self {
            KappaModel::Constant(k) => *k,
            KappaModel::Heterogeneous => heterogeneous_permeability(x),
            KappaModel::Custom(f) => f(x),
        }
    }
}

/// kappa = 700 (1 + 0.5 (sin(10 pi x1) cos(20 pi x2^2)
///        + cos^2(6.4 pi x1) sin(9.2 pi x2))) + 100.
pub fn heterogeneous_permeability(x: [f64; 2]) -> f64 {
    let pi = std::f64::consts::PI;
    let s = (10.0 * pi * x[0]).sin() * (20.0 * pi * x[1] * x[1]).cos();
    let c = (6.4 * pi * x[0]).cos().powi(2) * (9.2 * pi * x[1]).sin();
    700.0 * (1.0 + 0.5 * (s + c)) + 100.0
}

/// Diffusion/dispersion tensor model.
#[derive(Clone)]
pub enum DispersionModel {
    /// Constant matrices per region.
    ConstantMatrix {
        d_s: [[f64; 2]; 2],
        d_d: [[f64; 2]; 2],
    },
    /// diag(1 + u1^2, 1 + u2^2) in both regions.
    VelocityDiagonal,
    /// delta I in the Stokes region; phi d_m I + d_l |u| T + d_t |u| (I - T)
    /// with the longitudinal projector T = u u^T / |u|^2 in the Darcy region.
    Bear { delta: f64, d_m: f64, d_l: f64, d_t: f64 },
}

impl DispersionModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            DispersionModel::ConstantMatrix { d_s, d_d } => {
                for (name, m) in [("d_s", d_s), ("d_d", d_d)] {
                    if (m[0][1] - m[1][0]).abs() > 1e-14 {
                        return Err(Error::Config(format!("dispersion matrix {name} not symmetric")));
                    }
                    let tr = m[0][0] + m[1][1];
                    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                    if tr <= 0.0 || det <= 0.0 {
                        return Err(Error::Config(format!(
                            "dispersion matrix {name} not positive definite"
                        )));
                    }
                }
                Ok(())
            }
            DispersionModel::VelocityDiagonal => Ok(()),
            DispersionModel::Bear { delta, d_m, d_l, d_t } => {
                if *delta <= 0.0 || *d_m <= 0.0 || *d_l <= 0.0 || *d_t <= 0.0 {
                    return Err(Error::Config(
                        "Bear dispersion parameters must be positive".into(),
                    ));
                }
                if d_l < d_t {
                    return Err(Error::Config("Bear dispersion requires d_l >= d_t".into()));
                }
                Ok(())
            }
        }
    }
}

/// Evaluate the dispersion tensor for velocity `u` at a point of the given
/// region; `phi` is the local porosity (used by the Bear model).
pub fn dispersion_tensor(
    model: &DispersionModel,
    region: Region,
    u: [f64; 2],
    phi: f64,
) -> [[f64; 2]; 2] {
    match model {
        DispersionModel::ConstantMatrix { d_s, d_d } => match region {
            Region::Stokes => *d_s,
            Region::Darcy => *d_d,
        },
        DispersionModel::VelocityDiagonal => {
            [[1.0 + u[0] * u[0], 0.0], [0.0, 1.0 + u[1] * u[1]]]
        }
        DispersionModel::Bear { delta, d_m, d_l, d_t } => match region {
            Region::Stokes => [[*delta, 0.0], [0.0, *delta]],
            Region::Darcy => {
                let norm2 = u[0] * u[0] + u[1] * u[1];
                let base = phi * d_m;
                if norm2 == 0.0 {
                    // |u| T and |u| (I - T) both vanish in the limit u -> 0.
                    return [[base, 0.0], [0.0, base]];
                }
                let norm = norm2.sqrt();
                let t = [
                    [u[0] * u[0] / norm2, u[0] * u[1] / norm2],
                    [u[1] * u[0] / norm2, u[1] * u[1] / norm2],
                ];
                let mut d = [[0.0; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        let id = if i == j { 1.0 } else { 0.0 };
                        d[i][j] = base * id + d_l * norm * t[i][j] + d_t * norm * (id - t[i][j]);
                    }
                }
                d
            }
        },
    }
}

/// Flow boundary condition per boundary label.
#[derive(Clone)]
pub enum FlowBc {
    /// Full velocity vector prescribed; velocity-trace DOFs are eliminated
    /// and facet pressure rows receive the normal data.
    VelocityDirichlet(VectorFn),
    /// Normal velocity prescribed (value of u.n with outward normal); imposed
    /// through the facet pressure rows.
    NormalFlux(ScalarFn),
    /// Total traction (-2 mu eps(u) + p I) n prescribed; the velocity trace
    /// stays unknown and boundary coupling terms close the facet equations.
    Traction(VectorFn),
    /// u.n = 0 with zero tangential traction.
    SlipSymmetry,
    /// Pressure trace prescribed; the corresponding facet pressure DOFs are
    /// eliminated and u.n is left free.
    PressureTrace(ScalarFn),
}

/// Transport boundary condition.
#[derive(Clone)]
pub enum TransportBc {
    /// Zero total-flux condition; nothing to impose.
    Natural,
    /// Concentration trace prescribed on all boundary facets.
    Dirichlet(ScalarFn),
}

/// Boundary conditions per boundary label.
#[derive(Clone)]
pub struct BcSet {
    pub s1: FlowBc,
    pub s2: FlowBc,
    pub s3: FlowBc,
    pub d1: FlowBc,
    pub d2: FlowBc,
    pub transport: TransportBc,
}

impl BcSet {
    pub fn flow_bc(&self, kind: FacetKind) -> &FlowBc {
        match kind {
            FacetKind::GammaS1 => &self.s1,
            FacetKind::GammaS2 => &self.s2,
            FacetKind::GammaS3 => &self.s3,
            FacetKind::GammaD1 => &self.d1,
            FacetKind::GammaD2 => &self.d2,
            _ => panic!("flow_bc queried for non-boundary facet kind"),
        }
    }

    /// Homogeneous no-flow conditions (u = 0 on the Stokes boundary,
    /// u.n = 0 on the Darcy boundary), the closed-system default.
    pub fn closed() -> BcSet {
        let zero_vec: VectorFn = Arc::new(|_, _| [0.0, 0.0]);
        let zero: ScalarFn = Arc::new(|_, _| 0.0);
        BcSet {
            s1: FlowBc::VelocityDirichlet(zero_vec.clone()),
            s2: FlowBc::VelocityDirichlet(zero_vec.clone()),
            s3: FlowBc::VelocityDirichlet(zero_vec),
            d1: FlowBc::NormalFlux(zero.clone()),
            d2: FlowBc::NormalFlux(zero),
            transport: TransportBc::Natural,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, bc) in [
            ("Gamma^s_1", &self.s1),
            ("Gamma^s_2", &self.s2),
            ("Gamma^s_3", &self.s3),
        ] {
            if matches!(bc, FlowBc::NormalFlux(_) | FlowBc::PressureTrace(_)) {
                return Err(Error::Config(format!(
                    "{label}: Darcy-type condition on a Stokes boundary"
                )));
            }
        }
        for (label, bc) in [("Gamma^d_1", &self.d1), ("Gamma^d_2", &self.d2)] {
            if matches!(
                bc,
                FlowBc::VelocityDirichlet(_) | FlowBc::Traction(_) | FlowBc::SlipSymmetry
            ) {
                return Err(Error::Config(format!(
                    "{label}: Stokes-type condition on a Darcy boundary"
                )));
            }
        }
        Ok(())
    }
}

/// How the pressure mean is fixed when no pressure data is prescribed.
#[derive(Clone)]
pub enum MeanConstraint {
    Off,
    /// One extra multiplier row enforcing int_Omega p dx = target(t).
    Target(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl MeanConstraint {
    pub fn zero() -> MeanConstraint {
        MeanConstraint::Target(Arc::new(|_| 0.0))
    }

    pub fn is_active(&self) -> bool {
        matches!(self, MeanConstraint::Target(_))
    }
}

/// Weight of the diffusive interior-penalty term. The default uses the
/// normal-normal component n . D n; the flux-norm variant |D n| is kept for
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffPenaltyWeight {
    NormalNormal,
    FluxNorm,
}

/// All physical data of one problem instance.
#[derive(Clone)]
pub struct ProblemConfig {
    pub mu: MuModel,
    pub kappa: KappaModel,
    /// Porosity in the Darcy region (1 in the Stokes region).
    pub phi: f64,
    /// Slip coefficient of the interface friction law.
    pub alpha: f64,
    pub dispersion: DispersionModel,
    /// Body force in the Stokes region.
    pub f_s: Option<BodyForceFn>,
    /// Darcy forcing; enters as K^{-1}(c) f_d tested against v.
    pub f_d: Option<BodyForceFn>,
    /// Injection and production well rates (Darcy region).
    pub g_i: Option<ScalarFn>,
    pub g_p: Option<ScalarFn>,
    /// Injected concentration.
    pub c_inj: Option<ScalarFn>,
    /// Extra volumetric source in the transport equation (manufactured runs).
    pub transport_source: Option<ScalarFn>,
    pub bc: BcSet,
    pub u0: SpatialVectorFn,
    pub c0: SpatialScalarFn,
    pub mean_constraint: MeanConstraint,
    pub penalty_weight: DiffPenaltyWeight,
}

impl ProblemConfig {
    /// A quiescent closed box: zero data everywhere.
    pub fn zero() -> ProblemConfig {
        ProblemConfig {
            mu: MuModel::Constant(1.0),
            kappa: KappaModel::Constant(1.0),
            phi: 1.0,
            alpha: 1.0,
            dispersion: DispersionModel::ConstantMatrix {
                d_s: [[1.0, 0.0], [0.0, 1.0]],
                d_d: [[1.0, 0.0], [0.0, 1.0]],
            },
            f_s: None,
            f_d: None,
            g_i: None,
            g_p: None,
            c_inj: None,
            transport_source: None,
            bc: BcSet::closed(),
            u0: Arc::new(|_| [0.0, 0.0]),
            c0: Arc::new(|_| 0.0),
            mean_constraint: MeanConstraint::zero(),
            penalty_weight: DiffPenaltyWeight::NormalNormal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dispersion.validate()?;
        self.bc.validate()?;
        if self.phi <= 0.0 {
            return Err(Error::Config(format!("porosity must be positive, got {}", self.phi)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("slip coefficient alpha must be nonnegative".into()));
        }
        // Sample the viscosity over a plausible concentration range.
        for c in [-1.2, -0.5, 0.0, 0.5, 1.0, 1.2] {
            let mu = self.mu.eval(c);
            if !(mu.is_finite() && mu > 0.0) {
                return Err(Error::Config(format!("viscosity not positive at c = {c}: {mu}")));
            }
        }
        Ok(())
    }

    /// Porosity at a point: phi in the Darcy region, 1 in the Stokes region.
    pub fn porosity(&self, region: Region) -> f64 {
        match region {
            Region::Stokes => 1.0,
            Region::Darcy => self.phi,
        }
    }
}

/// Discretization parameters.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub k_f: usize,
    pub k_c: usize,
    pub beta_s: f64,
    pub beta_tr: f64,
    /// Raise quadrature exactness from 2k+2 to 2k+4 for non-polynomial data.
    pub quad_raise: bool,
    /// Statically condense cell unknowns before the sparse solve.
    pub condense: bool,
}

impl Discretization {
    /// Defaults for a given velocity degree: k_c = k_f - 1 and the standard
    /// penalties 6 k^2.
    pub fn new(k_f: usize) -> Result<Discretization> {
        if k_f < 2 {
            return Err(Error::Config(format!(
                "compatibility k_c = k_f - 1 requires k_f >= 2 in 2D, got k_f = {k_f}"
            )));
        }
        let k_c = k_f - 1;
        Ok(Discretization {
            k_f,
            k_c,
            beta_s: 6.0 * (k_f * k_f) as f64,
            beta_tr: 6.0 * (k_c * k_c) as f64,
            quad_raise: true,
            condense: false,
        })
    }

    pub fn with_degrees(k_f: usize, k_c: usize) -> Result<Discretization> {
        if k_f < 1 || k_c < 1 {
            return Err(Error::Config(format!(
                "polynomial degrees must be at least 1, got k_f = {k_f}, k_c = {k_c}"
            )));
        }
        if k_c == k_f - 1 && k_f < 2 {
            return Err(Error::Config(
                "compatible pairing k_c = k_f - 1 requires k_f >= 2 in 2D".into(),
            ));
        }
        Ok(Discretization {
            k_f,
            k_c,
            beta_s: 6.0 * (k_f * k_f) as f64,
            beta_tr: 6.0 * (k_c * k_c) as f64,
            quad_raise: true,
            condense: false,
        })
    }

    /// Volume/facet quadrature exactness for the flow forms.
    pub fn flow_quad_degree(&self) -> usize {
        if self.quad_raise {
            2 * self.k_f + 4
        } else {
            2 * self.k_f + 2
        }
    }

    /// Quadrature exactness for the transport forms.
    pub fn transport_quad_degree(&self) -> usize {
        if self.quad_raise {
            (2 * self.k_c + 3).max(2 * self.k_f + 4)
        } else {
            2 * self.k_c + 3
        }
    }
}
