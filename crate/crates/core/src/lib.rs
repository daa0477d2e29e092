//! Insensitizing controls for a one-dimensional quasilinear reaction-diffusion
//! equation with dynamic boundary conditions.
//!
//! The crate builds a control `v`, supported in a subinterval `ω`, that makes
//! the windowed energy
//!
//! ```text
//! 𝒥 = (θ/2) ∫∫_{𝒪×(0,T)} |ψ|² + (θ_Γ/2) ∫_{Σ×(0,T)} |ψ_Γ|²
//! ```
//!
//! insensitive, to first order, to perturbations of the initial datum. The
//! pipeline follows the constructive route: an equivalent cascade system
//! whose backward component must vanish at `t = 0`, a Carleman-weighted
//! least-squares null-control problem for its linearization, and a
//! modified-Newton outer loop that absorbs the nonlinear terms.
//!
//! Modules:
//!
//! * [`geometry`]: grids, regions, bulk-surface fields, summation by parts.
//! * [`weights`]: Carleman weights in log space and the weighted functionals.
//! * [`pdecore`]: operators and PDE solvers.
//! * [`ficontrol`]: the weighted least-squares control problem.
//! * [`insense`]: outer loop, energy functional and insensitivity checks.
//! * [`scenario`]: plain-data problem description and its assembly.
//! * [`sources`]: analytic source families used by tests and front ends.
//! * [`diagnostics`]: convergence, duality and estimate diagnostics.

pub mod diagnostics;
pub mod error;
pub mod ficontrol;
pub mod geometry;
pub mod insense;
pub mod linalg;
pub mod pdecore;
pub mod scenario;
pub mod sources;
pub mod weights;

pub use error::{Error, ErrorCategory, Result};
pub use geometry::{
    build_masks, l2_inner, normal_derivative, sbp_laplacian, Alignment, BulkSurfaceField,
    EndpointSet, Interval, RegionMasks, SpaceTimeField, SpatialGrid, TimeGrid,
};
pub use linalg::LogValue;
