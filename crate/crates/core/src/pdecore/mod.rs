//! Discrete operators and PDE solvers.
//!
//! * [`coefficients`]: the coefficient functions and their validation.
//! * [`operators`]: frozen-coefficient operators `L`, `L*` with exact
//!   discrete duality, and the observation coupling.
//! * [`solvers`]: linear forward, backward and cascade solvers.
//! * [`quasilinear`]: Newton-based quasilinear solver, the state-dependent
//!   cascade and the sensitivity system.

pub mod coefficients;
pub mod operators;
pub mod quasilinear;
pub mod solvers;

pub use coefficients::{CoefficientCheck, CoefficientFn, CoefficientSet};
pub use operators::{LinearOperatorSet, ObservationCoupling, OperatorVariant};
pub use quasilinear::{
    solve_quasilinear, solve_quasilinear_cascade, solve_sensitivity, InitialGuess,
    QuasilinearOperator, QuasilinearSolution,
};
pub use solvers::{
    check_control_support, solve_linear_backward, solve_linear_forward, solve_linearized_cascade,
    CascadeSolution,
};
