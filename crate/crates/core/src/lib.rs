//! A hybridizable discontinuous Galerkin (HDG) solver for the coupled,
//! time-dependent Stokes/Darcy--transport system on the unit square.
//!
//! The domain [0,1]^2 is split into a free-flow (Stokes) region on top
//! (x2 > 0.5) and a porous (Darcy) region below. Flow and solute transport
//! are discretized with facet-hybridized DG spaces; the two sub-problems are
//! advanced sequentially in time, lagging the concentration in all
//! concentration-dependent coefficients. The flow discretization produces a
//! velocity field that is H(div)-conforming and pointwise mass conservative,
//! which the transport step consumes directly.
//!
//! Module map:
//! - [`mesh`]: structured triangulations of the unit square with facet
//!   topology, subdomain tags and boundary labels,
//! - [`fem`]: polynomial bases, quadrature, DOF maps, projections and the
//!   BDM-type interpolation onto the velocity space,
//! - [`problem`]: physical coefficients, boundary conditions, run parameters,
//! - [`linsys`]: sparse assembly and the direct solver (full or statically
//!   condensed onto facet unknowns),
//! - [`flow`]: assembly and solution of one implicit Stokes/Darcy step,
//! - [`transport`]: assembly and solution of one implicit transport step,
//! - [`timeloop`]: the sequential time-stepping driver,
//! - [`verification`]: manufactured solutions, error norms and convergence
//!   studies,
//! - [`vtk`]: legacy-ASCII VTK snapshot output.

pub mod fem;
pub mod flow;
pub mod linsys;
pub mod mesh;
pub mod problem;
pub mod timeloop;
pub mod transport;
pub mod verification;
pub mod vtk;

use std::fmt;

/// Errors surfaced by mesh construction, configuration and solvers.
#[derive(Debug, Clone)]
pub enum Error {
    /// Invalid mesh parameters or broken mesh topology.
    Mesh(String),
    /// Unsupported quadrature degree; payload is (requested, max supported).
    Quadrature(usize, usize),
    /// Invalid configuration value.
    Config(String),
    /// Linear solver failure (singular or numerically unusable system).
    Solver(String),
    /// A self-check failed (e.g. manufactured-source validation).
    SelfCheck(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Mesh(msg) => write!(f, "mesh error: {msg}"),
            Error::Quadrature(d, max) => write!(
                f,
                "quadrature degree {d} not supported (max implemented degree is {max})"
            ),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Solver(msg) => write!(f, "solver error: {msg}"),
            Error::SelfCheck(msg) => write!(f, "self-check failed: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
