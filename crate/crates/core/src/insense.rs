//! Synthesis of the insensitizing control and its verification.
//!
//! The quasilinear cascade is written as `Λ(Ψ, H, v) = (F, G)` with
//!
//! ```text
//! Λ₁ = Ψ_t + W⁻¹N(Ψ) − v,        Λ₂ = −H_t + W⁻¹J(Ψ)ᵀH − W⁻¹SΨ,
//! ```
//!
//! in the trace-identified unknowns of [`crate::pdecore`]. Its linear part at
//! zero is `L(Ψ, H, v) = (LΨ − v, L*H − BΨ)`, and the nonlinear part is
//! `A = L − Λ`:
//!
//! ```text
//! A₁₃(Ψ)_c    = W⁻¹ (J₀ ψ_c − N(ψ_c)),
//! A₂₄(Ψ, H)_c = W⁻¹ (J₀ − J(ψ_c)ᵀ) h_{c−1}.
//! ```
//!
//! Bulk and surface rows share the boundary unknowns, so `A₁₃` carries both
//! the bulk part `A₁` and the surface part `A₃` (merged on the boundary row
//! exactly as the operators merge them), and likewise `A₂₄` carries `A₂` and
//! `A₄`.
//!
//! The outer loop is a modified Newton iteration with the derivative frozen
//! at zero: `L(xᵏ⁺¹) = (F + A₁₃(Ψᵏ), G + A₂₄(Ψᵏ, Hᵏ))`, each step solved by
//! the weighted least-squares construction of [`crate::ficontrol`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ficontrol::{
    source_norms, summarize, triple_quantities, FIProblem, FISolution, FISummary, FiSolver,
    TripleQuantities,
};
use crate::geometry::{
    bulk_inner, l2_norm, project, st_norm, sup_norm_in_time, Alignment, BulkSurfaceField,
    SpaceTimeField, SpatialGrid,
};
use crate::linalg::{wdot, LogValue};
use crate::pdecore::operators::{
    sync_trace, LinearOperatorSet, ObservationCoupling, OperatorVariant,
};
use crate::pdecore::quasilinear::{
    backward_state_dependent, solve_quasilinear, solve_quasilinear_cascade, solve_sensitivity,
    InitialGuess, QuasilinearOperator, NEWTON_TOL,
};
use crate::weights::WeightTables;

/// Weights of the energy functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    /// Bulk weight `θ > 0`.
    pub theta: f64,
    /// Surface weight `θ_Γ ≥ 0`.
    pub theta_gamma: f64,
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            theta_gamma: 1.0,
        }
    }
}

/// The two stacked nonlinear parts: `psi_rows` (`A₁` with `A₃` on the
/// boundary rows, forward cell field) and `h_rows` (`A₂` with `A₄`,
/// backward cell field).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearParts {
    /// Source for the state rows.
    pub psi_rows: SpaceTimeField,
    /// Source for the adjoint rows.
    pub h_rows: SpaceTimeField,
}

fn check_pair(op: &QuasilinearOperator, psi: &SpaceTimeField, h: &SpaceTimeField) -> Result<()> {
    op.linear().check_shape(psi)?;
    op.linear().check_shape(h)?;
    if psi.alignment != Alignment::Forward || h.alignment != Alignment::Backward {
        return Err(Error::Contract(
            "the state must be forward-aligned and the adjoint state backward-aligned".into(),
        ));
    }
    Ok(())
}

fn scaled_by_inverse_mass(mut v: Vec<f64>, w: &[f64]) -> BulkSurfaceField {
    for (x, wi) in v.iter_mut().zip(w) {
        *x /= wi;
    }
    BulkSurfaceField::from_trace(v)
}

fn tridiag_apply(t: &crate::linalg::Tridiag, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    t.apply(x, &mut out);
    out
}

/// Evaluate the nonlinear parts `A₁₃(Ψ)` and `A₂₄(Ψ, H)` with the same
/// stencils as the solvers.
pub fn nonlinear_parts(
    op: &QuasilinearOperator,
    psi: &SpaceTimeField,
    h: &SpaceTimeField,
) -> Result<NonlinearParts> {
    check_pair(op, psi, h)?;
    let (grid, time) = (op.grid(), op.time());
    let w = op.mass();
    let j0 = op.linear().stiffness();
    let mut a13 = SpaceTimeField::zeros(grid, time, Alignment::Forward);
    let mut a24 = SpaceTimeField::zeros(grid, time, Alignment::Backward);
    for c in 1..=time.steps() {
        let u = &psi.cell(c).bulk;
        let hc = &h.cell(c).bulk;
        let n = op.apply_n(u);
        let lin = tridiag_apply(j0, u);
        let r1: Vec<f64> = lin.iter().zip(&n).map(|(a, b)| a - b).collect();
        *a13.cell_mut(c) = scaled_by_inverse_mass(r1, w);
        let jt = op.apply_jt(u, hc);
        let lin = tridiag_apply(j0, hc);
        let r2: Vec<f64> = lin.iter().zip(&jt).map(|(a, b)| a - b).collect();
        *a24.cell_mut(c) = scaled_by_inverse_mass(r2, w);
    }
    Ok(NonlinearParts {
        psi_rows: a13,
        h_rows: a24,
    })
}

/// Directional derivative of the nonlinear parts at `(Ψ, H)` in the
/// direction `(Φ, K)`:
///
/// ```text
/// 𝐃A₁₃[Φ]_c    = W⁻¹ (J₀ − J(ψ_c)) φ_c,
/// 𝐃A₂₄[Φ, K]_c = W⁻¹ ((J₀ − J(ψ_c)ᵀ) k_{c−1} − ∂_ψ[J(ψ_c)ᵀ h_{c−1}] φ_c).
/// ```
pub fn apply_a_derivative(
    op: &QuasilinearOperator,
    psi: &SpaceTimeField,
    h: &SpaceTimeField,
    phi: &SpaceTimeField,
    k: &SpaceTimeField,
) -> Result<NonlinearParts> {
    check_pair(op, psi, h)?;
    check_pair(op, phi, k)?;
    let (grid, time) = (op.grid(), op.time());
    let w = op.mass();
    let j0 = op.linear().stiffness();
    let mut d13 = SpaceTimeField::zeros(grid, time, Alignment::Forward);
    let mut d24 = SpaceTimeField::zeros(grid, time, Alignment::Backward);
    for c in 1..=time.steps() {
        let u = &psi.cell(c).bulk;
        let hc = &h.cell(c).bulk;
        let pc = &phi.cell(c).bulk;
        let kc = &k.cell(c).bulk;
        let lin = tridiag_apply(j0, pc);
        let jp = op.apply_j(u, pc);
        let r1: Vec<f64> = lin.iter().zip(&jp).map(|(a, b)| a - b).collect();
        *d13.cell_mut(c) = scaled_by_inverse_mass(r1, w);
        let lin = tridiag_apply(j0, kc);
        let jk = op.apply_jt(u, kc);
        let dj = op.jt_derivative(u, hc, pc);
        let r2: Vec<f64> = (0..lin.len()).map(|i| lin[i] - jk[i] - dj[i]).collect();
        *d24.cell_mut(c) = scaled_by_inverse_mass(r2, w);
    }
    Ok(NonlinearParts {
        psi_rows: d13,
        h_rows: d24,
    })
}

/// The quasilinear cascade operator `Λ(Ψ, H, v)` evaluated directly.
pub fn apply_lambda(
    op: &QuasilinearOperator,
    coupling: &ObservationCoupling,
    psi: &SpaceTimeField,
    h: &SpaceTimeField,
    v: &SpaceTimeField,
) -> Result<NonlinearParts> {
    check_pair(op, psi, h)?;
    op.linear().check_shape(v)?;
    let (grid, time) = (op.grid(), op.time());
    let (w, idt) = (op.mass(), 1.0 / time.dt());
    let np = grid.nodes();
    let mut r1 = SpaceTimeField::zeros(grid, time, Alignment::Forward);
    let mut r2 = SpaceTimeField::zeros(grid, time, Alignment::Backward);
    for c in 1..=time.steps() {
        let (prev, cur) = (&psi.slices[c - 1].bulk, &psi.slices[c].bulk);
        let n = op.apply_n(cur);
        let vc = &v.cell(c).bulk;
        let out = &mut r1.slices[c];
        for i in 0..np {
            out.bulk[i] = (cur[i] - prev[i]) * idt + n[i] / w[i] - vc[i];
        }
        sync_trace(out);
        let (hp, hn) = (&h.slices[c - 1].bulk, &h.slices[c].bulk);
        let jt = op.apply_jt(cur, hp);
        let mut bpsi = vec![0.0; np];
        coupling.add_source(w, 1.0, cur, &mut bpsi);
        let out = &mut r2.slices[c - 1];
        for i in 0..np {
            out.bulk[i] = (hp[i] - hn[i]) * idt + jt[i] / w[i] - bpsi[i];
        }
        sync_trace(out);
    }
    Ok(NonlinearParts {
        psi_rows: r1,
        h_rows: r2,
    })
}

/// The linear part `L(Ψ, H, v) = (LΨ − v, L*H − BΨ)` of the cascade.
pub fn apply_linear_part(
    ops: &LinearOperatorSet,
    coupling: &ObservationCoupling,
    psi: &SpaceTimeField,
    h: &SpaceTimeField,
    v: &SpaceTimeField,
) -> Result<NonlinearParts> {
    let mut r1 = ops.apply_l(psi, OperatorVariant::Primal)?;
    let mut r2 = ops.apply_l(h, OperatorVariant::Adjoint)?;
    ops.check_shape(v)?;
    let w = ops.mass();
    for c in 1..=ops.time().steps() {
        let out = r1.cell_mut(c);
        for (o, x) in out.bulk.iter_mut().zip(&v.cell(c).bulk) {
            *o -= x;
        }
        sync_trace(out);
        let mut bpsi = vec![0.0; w.len()];
        coupling.add_source(w, 1.0, &psi.cell(c).bulk, &mut bpsi);
        let out = r2.cell_mut(c);
        for (o, x) in out.bulk.iter_mut().zip(&bpsi) {
            *o -= x;
        }
        sync_trace(out);
    }
    Ok(NonlinearParts {
        psi_rows: r1,
        h_rows: r2,
    })
}

/// Squared `𝕏` norm of a triple: the sum of all weighted quantities used by
/// the estimates, including `∫ μ₅² ‖Ψ_t‖²_{H²}`.
pub fn x_norm_squared(q: &TripleQuantities) -> LogValue {
    [
        q.mu0_psi,
        q.mu0_h,
        q.mu1_v,
        q.mu3_vt,
        q.sup_mu2_psi,
        q.mu2_grad_psi,
        q.sup_mu2_h,
        q.mu2_grad_h,
        q.sup_mu3_grad_psi,
        q.mu3_psi_t,
        q.mu3_lap_psi,
        q.sup_mu3_grad_h,
        q.mu3_h_t,
        q.mu3_lap_h,
        q.sup_mu4_psi_t,
        q.mu4_psi_t,
        q.mu4_grad_psi_t,
        q.sup_mu5_grad_psi_t,
        q.sup_mu5_psi_t,
        q.mu5_psi_tt,
        q.mu5_lap_psi_t,
        q.mu5_psi_t_h2,
        q.sup_mu5_lap_psi,
    ]
    .into_iter()
    .fold(LogValue::ZERO, LogValue::add)
}

/// `𝕏` norm of a triple (log space).
pub fn x_norm(
    grid: &SpatialGrid,
    tables: &WeightTables,
    psi: &SpaceTimeField,
    h: &SpaceTimeField,
    v: &SpaceTimeField,
) -> LogValue {
    x_norm_squared(&triple_quantities(grid, tables, psi, h, v)).sqrt()
}

/// `𝕐` norm `(‖μF‖² + ‖μG‖² + ‖μ₄F_t‖²)^{1/2}` of a source pair (log space).
pub fn y_norm(
    grid: &SpatialGrid,
    tables: &WeightTables,
    f: &SpaceTimeField,
    g: &SpaceTimeField,
) -> LogValue {
    source_norms(grid, tables, f, g).y_squared().sqrt()
}

/// Outer-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    /// Stop when `‖xᵏ⁺¹ − xᵏ‖_𝕏 ≤ loop_tol · ‖xᵏ⁺¹‖_𝕏`.
    #[serde(default = "default_loop_tol")]
    pub loop_tol: f64,
    /// Iteration cap.
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    /// Number of consecutive increment ratios `≥ 1` that count as
    /// non-contraction.
    #[serde(default = "default_window")]
    pub non_contraction_window: usize,
}

fn default_loop_tol() -> f64 {
    1e-9
}
fn default_max_outer() -> usize {
    30
}
fn default_window() -> usize {
    3
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            loop_tol: default_loop_tol(),
            max_outer: default_max_outer(),
            non_contraction_window: default_window(),
        }
    }
}

impl LoopConfig {
    fn validate(&self) -> Result<()> {
        if !(self.loop_tol > 0.0 && self.max_outer > 0 && self.non_contraction_window > 0) {
            return Err(Error::Config(
                "outer loop tolerance, iteration cap and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One outer iteration.
#[derive(Debug, Clone, Serialize)]
pub struct OuterIterate {
    /// Iteration number (1-based).
    pub iteration: usize,
    /// `‖xᵏ⁺¹ − xᵏ‖_𝕏 / ‖xᵏ⁺¹‖_𝕏` (0 when both vanish).
    pub increment: f64,
    /// `log ‖xᵏ⁺¹ − xᵏ‖_𝕏` (`−∞` for a zero increment).
    pub log_increment: f64,
    /// Ratio of this increment to the previous one.
    pub ratio: Option<f64>,
    /// `‖h(·,0)‖` of the quasilinear cascade driven by the current control,
    /// or `None` if that solve failed.
    pub h0_norm: Option<f64>,
    /// Solver sweeps of the weighted solve.
    pub fi_iterations: usize,
    /// Relative normal-equation residual of the weighted solve.
    pub fi_residual: f64,
}

/// Outcome status of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    /// The increment tolerance was met.
    Converged,
    /// The iteration cap was reached first.
    MaxIterations,
}

/// Result of [`synthesize`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    /// Loop status.
    pub status: LoopStatus,
    /// Number of outer iterations performed.
    pub iterations: usize,
    /// Per-iteration history.
    pub history: Vec<OuterIterate>,
    /// The synthesized control (forward cell field supported in `ω`).
    #[serde(skip)]
    pub v: SpaceTimeField,
    /// State of the last weighted solve.
    #[serde(skip)]
    pub psi: SpaceTimeField,
    /// Adjoint state of the last weighted solve.
    #[serde(skip)]
    pub h: SpaceTimeField,
    /// State of the quasilinear cascade driven by `v`.
    #[serde(skip)]
    pub verified_psi: SpaceTimeField,
    /// Adjoint state of the quasilinear cascade driven by `v`.
    #[serde(skip)]
    pub verified_h: SpaceTimeField,
    /// `‖h(·,0)‖` of the quasilinear cascade driven by `v`.
    pub h0_norm: f64,
    /// `‖h(·,0)‖` of the adjoint state recovered by the last weighted solve.
    pub h0_norm_recovered: f64,
    /// `sup_t ‖Ψ_verified − Ψ‖ / sup_t ‖Ψ‖` (0 for a zero state).
    pub state_mismatch: f64,
    /// `log ‖x‖_𝕏` of the final triple.
    pub log_x_norm: f64,
    /// `log ‖(F, G)‖_𝕐`.
    pub log_y_norm: f64,
    /// `‖v‖_{L²}`.
    pub v_l2: f64,
    /// `log(‖v‖_{L²} / ‖(F, G)‖_𝕐)` for the final control.
    pub log_control_ratio: f64,
    /// The same ratio for the first iterate (the linear problem).
    pub log_linear_control_ratio: f64,
    /// Summary of the last weighted solve (estimate ratios and residuals).
    pub fi_summary: FISummary,
}

impl SynthesisReport {
    /// Largest increment ratio after the first iteration (0 if fewer than
    /// two nonzero increments).
    pub fn max_increment_ratio(&self) -> f64 {
        self.history
            .iter()
            .filter_map(|h| h.ratio)
            .filter(|r| r.is_finite())
            .fold(0.0, f64::max)
    }
}

fn add_cells(base: &SpaceTimeField, extra: &SpaceTimeField, grid: &SpatialGrid) -> SpaceTimeField {
    let mut out = SpaceTimeField {
        alignment: extra.alignment,
        slices: vec![BulkSurfaceField::zeros_like(&extra.slices[0]); extra.slices.len()],
    };
    for c in 1..=extra.steps() {
        let mut p = project(base.cell(c), grid);
        for (x, y) in p.iter_mut().zip(&extra.cell(c).bulk) {
            *x += y;
        }
        *out.cell_mut(c) = BulkSurfaceField::from_trace(p);
    }
    out
}

fn difference(a: &SpaceTimeField, b: &SpaceTimeField) -> SpaceTimeField {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d
}

fn log_of(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Build the insensitizing control for sources `(F, G)` by the modified
/// Newton loop, then verify it with the quasilinear cascade.
///
/// # Errors
///
/// * [`Error::Smallness`] if the increments fail to contract for
///   `non_contraction_window` consecutive steps, or if the final quasilinear
///   verification fails.
/// * Errors of the weighted solves propagate.
pub fn synthesize(
    solver: &FiSolver,
    op: &QuasilinearOperator,
    f: &SpaceTimeField,
    g: &SpaceTimeField,
    cfg: &LoopConfig,
) -> Result<SynthesisReport> {
    cfg.validate()?;
    let setup = solver.setup();
    let (grid, time) = (setup.grid(), setup.time());
    if op.grid() != grid || op.time() != time {
        return Err(Error::GridMismatch(
            "quasilinear operator and weighted setup use different grids".into(),
        ));
    }
    if op.linear().frozen_coefficients() != setup.ops.frozen_coefficients() {
        return Err(Error::Contract(
            "the weighted setup must be linearized at zero from the same coefficients".into(),
        ));
    }
    let tables = &setup.tables;
    let log_y = y_norm(grid, tables, f, g).log;
    let v_l2 = |v: &SpaceTimeField| st_norm(v, grid, time);
    let mut psi = SpaceTimeField::zeros(grid, time, Alignment::Forward);
    let mut h = SpaceTimeField::zeros(grid, time, Alignment::Backward);
    let mut v = SpaceTimeField::zeros(grid, time, Alignment::Forward);
    let mut history: Vec<OuterIterate> = Vec::new();
    let mut status = LoopStatus::MaxIterations;
    let mut last: Option<(FIProblem, FISolution)> = None;
    let mut linear_ratio = f64::NEG_INFINITY;
    let mut non_contracting = 0usize;
    for it in 1..=cfg.max_outer {
        let a = nonlinear_parts(op, &psi, &h)?;
        let fk = add_cells(f, &a.psi_rows, grid);
        let gk = add_cells(g, &a.h_rows, grid);
        let problem = FIProblem::new(setup, fk, gk)?;
        let sol = solver.solve(&problem)?;
        let dq = triple_quantities(
            grid,
            tables,
            &difference(&sol.psi, &psi),
            &difference(&sol.h, &h),
            &difference(&sol.v, &v),
        );
        let inc = x_norm_squared(&dq).sqrt();
        let xn = x_norm(grid, tables, &sol.psi, &sol.h, &sol.v);
        let increment = if inc.is_zero() {
            0.0
        } else {
            inc.log_ratio(xn).exp()
        };
        let ratio = history.last().and_then(|prev| {
            if prev.log_increment == f64::NEG_INFINITY {
                None
            } else {
                Some((inc.log - prev.log_increment).exp())
            }
        });
        let h0 = solve_quasilinear_cascade(
            op,
            &setup.coupling,
            &setup.masks.omega_nodes,
            Some(f),
            Some(g),
            &sol.v,
        )
        .ok()
        .map(|c| l2_norm(&c.h.slices[0], grid));
        history.push(OuterIterate {
            iteration: it,
            increment,
            log_increment: inc.log,
            ratio,
            h0_norm: h0,
            fi_iterations: sol.cg_iterations,
            fi_residual: sol.relative_residual,
        });
        psi = sol.psi.clone();
        h = sol.h.clone();
        v = sol.v.clone();
        if it == 1 {
            linear_ratio = log_of(v_l2(&v)?) - log_y;
        }
        last = Some((problem, sol));
        if increment <= cfg.loop_tol {
            status = LoopStatus::Converged;
            break;
        }
        match ratio {
            Some(r) if r >= 1.0 => non_contracting += 1,
            _ => non_contracting = 0,
        }
        if non_contracting >= cfg.non_contraction_window {
            return Err(Error::Smallness(format!(
                "outer loop is not contracting: increment ratio ≥ 1 for {} consecutive steps \
                 (last relative increment {increment:e}); the sources exceed the small-data radius",
                cfg.non_contraction_window
            )));
        }
    }
    let (problem, sol) =
        last.ok_or_else(|| Error::Internal("outer loop ran no iteration".into()))?;
    let fi_summary = summarize(&problem, &sol)?;
    let cascade = solve_quasilinear_cascade(
        op,
        &setup.coupling,
        &setup.masks.omega_nodes,
        Some(f),
        Some(g),
        &v,
    )?;
    let scale = sup_norm_in_time(&psi, grid);
    let state_mismatch = if scale > 0.0 {
        sup_norm_in_time(&difference(&cascade.psi, &psi), grid) / scale
    } else {
        sup_norm_in_time(&cascade.psi, grid)
    };
    let v_l2 = v_l2(&v)?;
    Ok(SynthesisReport {
        status,
        iterations: history.len(),
        h0_norm: l2_norm(&cascade.h.slices[0], grid),
        h0_norm_recovered: sol.h0_norm(grid),
        state_mismatch,
        log_x_norm: x_norm(grid, tables, &psi, &h, &v).log,
        log_y_norm: log_y,
        v_l2,
        log_control_ratio: log_of(v_l2) - log_y,
        log_linear_control_ratio: linear_ratio,
        fi_summary,
        history,
        v,
        psi,
        h,
        verified_psi: cascade.psi,
        verified_h: cascade.h,
    })
}

/// Discrete `ℍ³` proxy norm: pair `𝕃²` norm of the value plus the `𝕃²`
/// norms of the first, second and third bulk differences.
pub fn h3_proxy_norm(field: &BulkSurfaceField, grid: &SpatialGrid) -> f64 {
    let h = grid.spacing();
    let mut total = l2_norm(field, grid).powi(2);
    let mut d = field.bulk.clone();
    for _ in 0..3 {
        d = d.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        total += h * d.iter().map(|x| x * x).sum::<f64>();
    }
    total.sqrt()
}

/// A perturbation direction `(ψ̂₀, ψ̂₀_Γ)` of unit proxy norm with its
/// ladder of step sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationSpec {
    /// The direction, trace-compatible.
    pub direction: BulkSurfaceField,
    /// Step sizes, strictly decreasing and positive.
    pub ladder: Vec<f64>,
}

/// Default step ladder.
pub const DEFAULT_LADDER: [f64; 3] = [4e-2, 2e-2, 1e-2];

impl PerturbationSpec {
    /// Normalize `direction` to unit proxy norm and validate the ladder.
    pub fn new(direction: BulkSurfaceField, ladder: Vec<f64>, grid: &SpatialGrid) -> Result<Self> {
        if direction.bulk.len() != grid.nodes() {
            return Err(Error::GridMismatch(
                "perturbation direction node count".into(),
            ));
        }
        if !direction.is_trace_compatible(1e-12 * (1.0 + direction.max_abs())) {
            return Err(Error::Contract(
                "perturbation direction must be trace-compatible (A5)".into(),
            ));
        }
        if ladder.len() < 2
            || ladder.iter().any(|t| !(t.is_finite() && *t > 0.0))
            || ladder.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::Config(
                "step ladder needs at least two positive, strictly decreasing steps".into(),
            ));
        }
        let n = h3_proxy_norm(&direction, grid);
        if n == 0.0 {
            return Err(Error::Config("perturbation direction is zero".into()));
        }
        let mut direction = direction;
        direction.scale(1.0 / n);
        Ok(Self { direction, ladder })
    }

    /// Seeded random smooth direction.
    pub fn random(
        grid: &SpatialGrid,
        modes: usize,
        ladder: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = crate::sources::random_profile(grid, modes.max(1), rng);
        Self::new(d, ladder, grid)
    }
}

/// Data of the energy functional for a fixed control.
#[derive(Debug, Clone, Copy)]
pub struct EnergySetup<'a> {
    /// Quasilinear operator.
    pub op: &'a QuasilinearOperator,
    /// Observation coupling (carries `θ`, `θ_Γ` and the windows).
    pub coupling: &'a ObservationCoupling,
    /// State source `F`.
    pub f: Option<&'a SpaceTimeField>,
    /// Control.
    pub v: &'a SpaceTimeField,
}

/// `½ Σ_c Δt ψ_cᵀ S ψ_c`: the quadrature of
/// `(θ/2)∫∫_𝒪 |ψ|² + (θ_Γ/2)∫_Σ |ψ_Γ|²`.
pub fn energy_of_state(coupling: &ObservationCoupling, psi: &SpaceTimeField, dt: f64) -> f64 {
    let m = psi.steps();
    0.5 * dt
        * (1..=m)
            .map(|c| coupling.pairing(&psi.cell(c).bulk, &psi.cell(c).bulk))
            .sum::<f64>()
}

/// `𝒥` for the initial datum `(τ ψ̂₀, τ_Γ ψ̂₀_Γ)`, projected onto the
/// trace-identified unknowns.
pub fn evaluate_j(
    e: &EnergySetup,
    tau: f64,
    tau_gamma: f64,
    direction: &BulkSurfaceField,
) -> Result<f64> {
    let grid = e.op.grid();
    let datum = BulkSurfaceField {
        bulk: direction.bulk.iter().map(|x| tau * x).collect(),
        surface: [
            tau_gamma * direction.surface[0],
            tau_gamma * direction.surface[1],
        ],
    };
    let psi0 = BulkSurfaceField::from_trace(project(&datum, grid));
    let sol = solve_quasilinear(e.op, e.f, &psi0, Some(e.v), InitialGuess::Previous)?;
    Ok(energy_of_state(e.coupling, &sol.psi, e.op.time().dt()))
}

/// Which component of the initial datum is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbedPart {
    /// `τ` (bulk datum).
    Bulk,
    /// `τ_Γ` (surface datum).
    Surface,
}

/// Both estimators of one partial derivative of `𝒥` at zero.
#[derive(Debug, Clone, Serialize)]
pub struct PartialDerivativeCheck {
    /// Perturbed component.
    pub part: PerturbedPart,
    /// `(τ, 𝒥(τ), 𝒥(−τ))` on the ladder.
    pub ladder: Vec<(f64, f64, f64)>,
    /// `𝒥(0)`.
    pub j0: f64,
    /// Centered differences on the ladder.
    pub centered: Vec<f64>,
    /// Richardson extrapolations of consecutive centered differences.
    pub richardson: Vec<f64>,
    /// The finite-difference estimate (finest Richardson value).
    pub fd: f64,
    /// The adjoint value `⟨ψ̂₀, h(·,0)⟩` or `⟨ψ̂₀_Γ, h_Γ(·,0)⟩`.
    pub adjoint: f64,
    /// `|fd − adjoint|`.
    pub discrepancy: f64,
    /// Largest `|𝒥(τ) + 𝒥(−τ) − 2𝒥(0)| / τ²` on the ladder.
    pub curvature: f64,
    /// Agreement budget `max(1e−6, 10 τ_min² · curvature)`.
    pub budget: f64,
    /// Truncation term: spread of the last two Richardson values (or of the
    /// last two centered differences when only one extrapolation exists).
    pub fd_truncation: f64,
    /// Rounding term: Newton tolerance propagated through the centered
    /// difference at the smallest step.
    pub newton_noise: f64,
    /// Synthesis term: Cauchy–Schwarz bound `‖ψ̂‖ ‖h(·,0)‖` on the
    /// derivative of the discrete functional.
    pub synthesis_residual: f64,
    /// Least-squares fit `𝒥(τ) − 𝒥(0) ≈ a τ + b τ²`: the coefficient `a`.
    pub linear_coefficient: f64,
    /// The coefficient `b` of the same fit.
    pub quadratic_coefficient: f64,
    /// Set when the centered differences show no `O(τ²)` trend above the
    /// rounding level.
    pub warning: Option<String>,
}

impl PartialDerivativeCheck {
    /// Whether the two estimators agree within the budget.
    pub fn agrees(&self) -> bool {
        self.discrepancy <= self.budget
    }
}

/// Both partial derivatives for one direction.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionCheck {
    /// Index of the direction.
    pub index: usize,
    /// `∂𝒥/∂τ`.
    pub bulk: PartialDerivativeCheck,
    /// `∂𝒥/∂τ_Γ`.
    pub surface: PartialDerivativeCheck,
}

/// Report of [`insensitivity_check`].
#[derive(Debug, Clone, Serialize)]
pub struct InsensitivityReport {
    /// `‖h(·,0)‖` of the adjoint state of the unperturbed cascade.
    pub h0_norm: f64,
    /// Per-direction results.
    pub directions: Vec<DirectionCheck>,
}

impl InsensitivityReport {
    /// Largest absolute value over all estimators, parts and directions.
    pub fn max_abs_derivative(&self) -> f64 {
        self.checks()
            .map(|c| c.fd.abs().max(c.adjoint.abs()))
            .fold(0.0, f64::max)
    }

    /// Largest absolute linear coefficient of the ladder fits.
    pub fn max_abs_linear_coefficient(&self) -> f64 {
        self.checks()
            .map(|c| c.linear_coefficient.abs())
            .fold(0.0, f64::max)
    }

    /// Whether every estimator pair agrees within its budget.
    pub fn all_agree(&self) -> bool {
        self.checks().all(PartialDerivativeCheck::agrees)
    }

    /// All partial-derivative checks.
    pub fn checks(&self) -> impl Iterator<Item = &PartialDerivativeCheck> {
        self.directions.iter().flat_map(|d| [&d.bulk, &d.surface])
    }
}

fn partial_check(
    e: &EnergySetup,
    spec: &PerturbationSpec,
    part: PerturbedPart,
    j0: f64,
    h0: &BulkSurfaceField,
    psi_sup: f64,
) -> Result<PartialDerivativeCheck> {
    let grid = e.op.grid();
    let d = &spec.direction;
    let (eval, adjoint, dnorm) = match part {
        PerturbedPart::Bulk => (
            Box::new(|t: f64| evaluate_j(e, t, 0.0, d)) as Box<dyn Fn(f64) -> Result<f64>>,
            bulk_inner(&d.bulk, &h0.bulk, grid),
            bulk_inner(&d.bulk, &d.bulk, grid).sqrt(),
        ),
        PerturbedPart::Surface => (
            Box::new(|t: f64| evaluate_j(e, 0.0, t, d)) as Box<dyn Fn(f64) -> Result<f64>>,
            d.surface[0] * h0.surface[0] + d.surface[1] * h0.surface[1],
            (d.surface[0].powi(2) + d.surface[1].powi(2)).sqrt(),
        ),
    };
    let mut ladder = Vec::with_capacity(spec.ladder.len());
    for &t in &spec.ladder {
        ladder.push((t, eval(t)?, eval(-t)?));
    }
    let centered: Vec<f64> = ladder.iter().map(|(t, p, m)| (p - m) / (2.0 * t)).collect();
    let richardson: Vec<f64> = (1..ladder.len())
        .map(|k| {
            let q2 = (ladder[k - 1].0 / ladder[k].0).powi(2);
            (q2 * centered[k] - centered[k - 1]) / (q2 - 1.0)
        })
        .collect();
    let fd = *richardson.last().unwrap_or(&centered[centered.len() - 1]);
    let fd_truncation = if richardson.len() >= 2 {
        (richardson[richardson.len() - 1] - richardson[richardson.len() - 2]).abs()
    } else {
        (centered[centered.len() - 1] - centered[centered.len() - 2]).abs()
    };
    let curvature = ladder
        .iter()
        .map(|(t, p, m)| (p + m - 2.0 * j0).abs() / (t * t))
        .fold(0.0, f64::max);
    let tmin = ladder[ladder.len() - 1].0;
    let budget = f64::max(1e-6, 10.0 * tmin * tmin * curvature);
    let horizon = e.op.time().horizon();
    let s_max = e.coupling.s_diag.iter().fold(0.0_f64, |a, b| a.max(*b));
    let newton_noise =
        NEWTON_TOL * (1.0 + psi_sup + tmin) * s_max * psi_sup.max(tmin) * horizon / tmin;
    // Least squares for a τ + b τ² on the points ±τ: the odd and even parts
    // decouple, so each coefficient is a one-dimensional fit.
    let (mut num_a, mut den_a, mut num_b, mut den_b) = (0.0, 0.0, 0.0, 0.0);
    for (t, p, m) in &ladder {
        num_a += t * (p - m) / 2.0;
        den_a += t * t;
        num_b += t * t * ((p + m) / 2.0 - j0);
        den_b += t.powi(4);
    }
    let warning = if centered.len() >= 3 {
        let n = centered.len();
        let (d1, d2) = (
            centered[n - 3] - centered[n - 2],
            centered[n - 2] - centered[n - 1],
        );
        let q2 = (ladder[n - 2].0 / ladder[n - 1].0).powi(2);
        let floor = 10.0 * newton_noise + 1e-14 * (centered[n - 1].abs() + 1e-300);
        if d1.abs() > floor && d2.abs() > floor {
            let observed = d1 / d2;
            (!(observed > 0.5 * q2 && observed < 2.0 * q2)).then(|| {
                format!(
                    "centered differences contract by {observed:.3} per step (expected about \
                     {q2:.1}); the ladder may be too coarse"
                )
            })
        } else {
            None
        }
    } else {
        None
    };
    Ok(PartialDerivativeCheck {
        part,
        j0,
        centered,
        richardson,
        fd,
        adjoint,
        discrepancy: (fd - adjoint).abs(),
        curvature,
        budget,
        fd_truncation,
        newton_noise,
        synthesis_residual: dnorm
            * match part {
                PerturbedPart::Bulk => bulk_inner(&h0.bulk, &h0.bulk, grid).sqrt(),
                PerturbedPart::Surface => (h0.surface[0].powi(2) + h0.surface[1].powi(2)).sqrt(),
            },
        linear_coefficient: num_a / den_a,
        quadratic_coefficient: num_b / den_b,
        ladder,
        warning,
    })
}

/// For each direction, estimate `∂𝒥/∂τ` and `∂𝒥/∂τ_Γ` at zero by
/// Richardson-extrapolated centered differences and by the adjoint pairing
/// with `h(·,0)` of the cascade `−h_t + J(ψ)ᵀh = Sψ`, `h(T) = 0`.
pub fn insensitivity_check(
    e: &EnergySetup,
    directions: &[PerturbationSpec],
) -> Result<InsensitivityReport> {
    let zero = BulkSurfaceField::zeros(e.op.grid());
    let base = solve_quasilinear(e.op, e.f, &zero, Some(e.v), InitialGuess::Previous)?;
    let h = backward_state_dependent(e.op, &base.psi, None, Some(e.coupling))?;
    let h0 = h.slices[0].clone();
    let j0 = energy_of_state(e.coupling, &base.psi, e.op.time().dt());
    let psi_sup = base.psi.max_abs();
    let mut out = Vec::with_capacity(directions.len());
    for (index, spec) in directions.iter().enumerate() {
        if spec.direction.bulk.len() != e.op.grid().nodes() {
            return Err(Error::GridMismatch(
                "perturbation direction node count".into(),
            ));
        }
        out.push(DirectionCheck {
            index,
            bulk: partial_check(e, spec, PerturbedPart::Bulk, j0, &h0, psi_sup)?,
            surface: partial_check(e, spec, PerturbedPart::Surface, j0, &h0, psi_sup)?,
        });
    }
    Ok(InsensitivityReport {
        h0_norm: l2_norm(&h0, e.op.grid()),
        directions: out,
    })
}

/// Both sides of the sensitivity duality identity.
#[derive(Debug, Clone, Serialize)]
pub struct DualityIdentity {
    /// `Σ_c Δt ψ_cᵀ S z_c` (the `θ`- and `θ_Γ`-weighted integrals of `ψ z`).
    pub lhs: f64,
    /// `⟨z(·,0), h(·,0)⟩`.
    pub rhs: f64,
    /// `|lhs − rhs|`.
    pub discrepancy: f64,
    /// `discrepancy / max(|lhs|, |rhs|)` (0 when both vanish).
    pub relative: f64,
}

/// Check `θ∫∫_𝒪 ψz + θ_Γ∫_Σ ψ_Γ z_Γ = ⟨z(·,0), h(·,0)⟩` for the sensitivity
/// `z` started from `direction` and the adjoint state `h` of the state `Ψ`.
pub fn duality_identity_check(
    op: &QuasilinearOperator,
    coupling: &ObservationCoupling,
    psi: &SpaceTimeField,
    direction: &BulkSurfaceField,
) -> Result<DualityIdentity> {
    let z = solve_sensitivity(op, psi, direction)?;
    let h = backward_state_dependent(op, psi, None, Some(coupling))?;
    let dt = op.time().dt();
    let lhs = dt
        * (1..=psi.steps())
            .map(|c| coupling.pairing(&psi.cell(c).bulk, &z.slices[c].bulk))
            .sum::<f64>();
    let rhs = wdot(&z.slices[0].bulk, op.mass(), &h.slices[0].bulk);
    let discrepancy = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs());
    Ok(DualityIdentity {
        lhs,
        rhs,
        discrepancy,
        relative: if scale > 0.0 {
            discrepancy / scale
        } else {
            0.0
        },
    })
}
