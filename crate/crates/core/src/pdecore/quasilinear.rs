//! Quasilinear state equation, its cascade and the sensitivity system.
//!
//! The spatial operator in trace-identified unknowns is
//!
//! ```text
//! N(u)_i = Σ_faces ± σ(ū_f)(u_i − u_{i+1})/h + h ω_i a(u_i) + [i ∈ Γ] b(u_i),
//! ```
//!
//! with face averages `ū_f = (u_i + u_{i+1})/2`. It reduces to `J₀u` for
//! linear coefficients. Its exact Jacobian `J(u)` is tridiagonal; the backward
//! equation of the cascade uses `J(ψ)ᵀ`, which is the discrete counterpart of
//! `−σ(ψ)Δh + a′(ψ)h` (the drift terms of the linearized divergence form
//! cancel under transposition). Using the exact transpose makes the
//! sensitivity duality `Σ Δt ψᵀSz = ⟨z(0), h(0)⟩` hold to roundoff.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    project, Alignment, BulkSurfaceField, SpaceTimeField, SpatialGrid, TimeGrid,
};
use crate::linalg::Tridiag;
use crate::pdecore::coefficients::{CoefficientCheck, CoefficientSet};
use crate::pdecore::operators::{
    assemble_stiffness, step_matrix, sync_trace, LinearOperatorSet, ObservationCoupling,
};
use crate::pdecore::solvers::{check_control_support, CascadeSolution};

/// Newton stopping tolerance on the increment, relative to `1 + ‖u‖∞`.
pub const NEWTON_TOL: f64 = 1e-11;
/// Newton iteration cap per time step.
pub const NEWTON_MAX_ITER: usize = 25;

/// Starting point of the Newton iteration at each time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitialGuess {
    /// The solution at the previous time node.
    Previous,
    /// The previous solution shifted by the given constant.
    Offset(f64),
}

/// Quasilinear operator with its frozen linear part.
#[derive(Debug, Clone)]
pub struct QuasilinearOperator {
    grid: SpatialGrid,
    time: TimeGrid,
    coeffs: CoefficientSet,
    linear: LinearOperatorSet,
}

impl QuasilinearOperator {
    /// Build and validate on the default sampling interval.
    pub fn new(grid: &SpatialGrid, time: &TimeGrid, coeffs: &CoefficientSet) -> Result<Self> {
        coeffs.validate(&CoefficientCheck::default())?;
        Ok(Self {
            grid: grid.clone(),
            time: time.clone(),
            coeffs: coeffs.clone(),
            linear: LinearOperatorSet::new(grid, time, coeffs)?,
        })
    }

    /// Frozen-coefficient operators `L`, `L*`.
    pub fn linear(&self) -> &LinearOperatorSet {
        &self.linear
    }

    /// Coefficient set.
    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }

    /// Spatial grid.
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Time grid.
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    /// Pair mass `W`.
    pub fn mass(&self) -> &[f64] {
        self.linear.mass()
    }

    /// Nonlinear spatial operator `N(u)`.
    pub fn apply_n(&self, u: &[f64]) -> Vec<f64> {
        let n = self.grid.cells();
        let ih = 1.0 / self.grid.spacing();
        let mut out = vec![0.0; n + 1];
        for f in 0..n {
            let ubar = 0.5 * (u[f] + u[f + 1]);
            let q = self.coeffs.sigma.value(ubar) * (u[f] - u[f + 1]) * ih;
            out[f] += q;
            out[f + 1] -= q;
        }
        for i in 0..=n {
            out[i] += self.grid.trapezoid_weight(i) * self.coeffs.a.value(u[i]);
        }
        out[0] += self.coeffs.b.value(u[0]);
        out[n] += self.coeffs.b.value(u[n]);
        out
    }

    /// Per-face Jacobian entries `(p_f, m_f)`: the face flux
    /// `σ(ū)(u_i − u_{i+1})/h` has partial derivatives `p_f` in `u_i` and
    /// `m_f` in `u_{i+1}`.
    fn face_partials(&self, u: &[f64], f: usize) -> (f64, f64) {
        let ih = 1.0 / self.grid.spacing();
        let ubar = 0.5 * (u[f] + u[f + 1]);
        let d = (u[f] - u[f + 1]) * ih;
        let s = self.coeffs.sigma.value(ubar);
        let s1 = self.coeffs.sigma.d1(ubar);
        (0.5 * s1 * d + s * ih, 0.5 * s1 * d - s * ih)
    }

    /// Exact Jacobian `J(u) = N′(u)`.
    pub fn jacobian(&self, u: &[f64]) -> Tridiag {
        let n = self.grid.cells();
        let mut j = Tridiag::zeros(n + 1);
        for f in 0..n {
            let (p, m) = self.face_partials(u, f);
            j.diag[f] += p;
            j.upper[f] += m;
            j.lower[f] -= p;
            j.diag[f + 1] -= m;
        }
        for i in 0..=n {
            j.diag[i] += self.grid.trapezoid_weight(i) * self.coeffs.a.d1(u[i]);
        }
        j.diag[0] += self.coeffs.b.d1(u[0]);
        j.diag[n] += self.coeffs.b.d1(u[n]);
        j
    }

    /// `J(u)ᵀ h`.
    pub fn apply_jt(&self, u: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h.len()];
        self.jacobian(u).apply_transpose(h, &mut out);
        out
    }

    /// Directional derivative `d/dε [J(u + εφ)ᵀ h]` at `ε = 0`.
    pub fn jt_derivative(&self, u: &[f64], h: &[f64], phi: &[f64]) -> Vec<f64> {
        let n = self.grid.cells();
        let ih = 1.0 / self.grid.spacing();
        let mut out = vec![0.0; n + 1];
        for f in 0..n {
            let ubar = 0.5 * (u[f] + u[f + 1]);
            let d = (u[f] - u[f + 1]) * ih;
            let dubar = 0.5 * (phi[f] + phi[f + 1]);
            let dd = (phi[f] - phi[f + 1]) * ih;
            let s1 = self.coeffs.sigma.d1(ubar);
            let s2 = self.coeffs.sigma.d2(ubar);
            let common = 0.5 * s2 * dubar * d + 0.5 * s1 * dd;
            let dp = common + s1 * dubar * ih;
            let dm = common - s1 * dubar * ih;
            let jump = h[f] - h[f + 1];
            out[f] += dp * jump;
            out[f + 1] += dm * jump;
        }
        for i in 0..=n {
            out[i] += self.grid.trapezoid_weight(i) * self.coeffs.a.d2(u[i]) * phi[i] * h[i];
        }
        out[0] += self.coeffs.b.d2(u[0]) * phi[0] * h[0];
        out[n] += self.coeffs.b.d2(u[n]) * phi[n] * h[n];
        out
    }

    /// `J(u) φ`.
    pub fn apply_j(&self, u: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; phi.len()];
        self.jacobian(u).apply(phi, &mut out);
        out
    }

    /// Linearized stiffness at zero state, `J₀`.
    pub fn frozen_stiffness(&self) -> Tridiag {
        let n = self.grid.cells();
        assemble_stiffness(
            &self.grid,
            &vec![self.coeffs.sigma.value(0.0); n],
            &vec![self.coeffs.a.d1(0.0); n + 1],
            [self.coeffs.b.d1(0.0); 2],
        )
    }
}

/// Result of a quasilinear solve.
#[derive(Debug, Clone, Serialize)]
pub struct QuasilinearSolution {
    /// The state, forward-aligned, slice 0 is the initial datum.
    pub psi: SpaceTimeField,
    /// Newton iterations used at each time step.
    pub newton_iterations: Vec<usize>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve `ψ_t − ∇·(σ(ψ)∇ψ) + a(ψ) = f + v 1_ω` with the dynamic boundary
/// row `ψ_Γ,t + σ ∂_ν ψ + b(ψ_Γ) = f_Γ`, fully implicit, by Newton's method
/// at every time step.
///
/// # Errors
///
/// A step whose Newton iteration does not reach the tolerance within
/// [`NEWTON_MAX_ITER`] iterations (or produces non-finite values) yields
/// [`Error::Smallness`]: the data are outside the small-data regime.
pub fn solve_quasilinear(
    op: &QuasilinearOperator,
    f: Option<&SpaceTimeField>,
    psi0: &BulkSurfaceField,
    v: Option<&SpaceTimeField>,
    guess: InitialGuess,
) -> Result<QuasilinearSolution> {
    let grid = &op.grid;
    let m = op.time.steps();
    let np = grid.nodes();
    let dt = op.time.dt();
    let w = op.mass();
    if psi0.bulk.len() != np {
        return Err(Error::GridMismatch(
            "initial datum has the wrong node count".into(),
        ));
    }
    if !psi0.is_trace_compatible(1e-12 * (1.0 + psi0.max_abs())) {
        return Err(Error::Contract(
            "initial datum must be trace-compatible (surface value = boundary trace)".into(),
        ));
    }
    if let Some(f) = f {
        op.linear.check_shape(f)?;
    }
    if let Some(v) = v {
        op.linear.check_shape(v)?;
    }
    let mut out = SpaceTimeField::zeros(grid, &op.time, Alignment::Forward);
    out.slices[0] = BulkSurfaceField::from_trace(psi0.bulk.clone());
    let mut iterations = Vec::with_capacity(m);
    for c in 1..=m {
        let mut load = match f {
            Some(f) => project(f.cell(c), grid),
            None => vec![0.0; np],
        };
        if let Some(v) = v {
            for (l, x) in load.iter_mut().zip(&v.cell(c).bulk) {
                *l += x;
            }
        }
        let prev = out.slices[c - 1].bulk.clone();
        let mut u = prev.clone();
        if let InitialGuess::Offset(d) = guess {
            u.iter_mut().for_each(|x| *x += d);
        }
        let mut converged = false;
        let mut last = f64::INFINITY;
        let mut it = 0;
        while it < NEWTON_MAX_ITER {
            it += 1;
            let nu = op.apply_n(&u);
            let mut g: Vec<f64> = (0..np)
                .map(|i| w[i] * ((u[i] - prev[i]) / dt - load[i]) + nu[i])
                .collect();
            let jac = step_matrix(w, dt, &op.jacobian(&u));
            let lu = jac.factor().map_err(|_| {
                Error::Smallness(format!(
                    "Newton Jacobian became singular at time step {c} (iteration {it})"
                ))
            })?;
            lu.solve_in_place(&mut g);
            for (x, d) in u.iter_mut().zip(&g) {
                *x -= d;
            }
            last = max_abs(&g);
            if !last.is_finite() || !u.iter().all(|x| x.is_finite()) {
                break;
            }
            if last <= NEWTON_TOL * (1.0 + max_abs(&u)) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Smallness(format!(
                "Newton iteration failed at time step {c} of {m} after {it} iterations \
                 (last increment {last:e}); the data exceed the small-data regime"
            )));
        }
        iterations.push(it);
        out.slices[c].bulk = u;
        sync_trace(&mut out.slices[c]);
    }
    Ok(QuasilinearSolution {
        psi: out,
        newton_iterations: iterations,
    })
}

/// Backward equation with state-dependent coefficients,
/// `W(h_{c−1} − h_c)/Δt + J(ψ_c)ᵀ h_{c−1} = W g_c + S ψ_c`, `h_M = 0`.
pub(crate) fn backward_state_dependent(
    op: &QuasilinearOperator,
    psi: &SpaceTimeField,
    g: Option<&SpaceTimeField>,
    coupling: Option<&ObservationCoupling>,
) -> Result<SpaceTimeField> {
    let m = op.time.steps();
    let np = op.grid.nodes();
    let dt = op.time.dt();
    let w = op.mass();
    let mut out = SpaceTimeField::zeros(&op.grid, &op.time, Alignment::Backward);
    for c in (1..=m).rev() {
        let pc = &psi.cell(c).bulk;
        let mut src = match g {
            Some(g) => project(g.cell(c), &op.grid),
            None => vec![0.0; np],
        };
        if let Some(cp) = coupling {
            cp.add_source(w, 1.0, pc, &mut src);
        }
        let next = &out.slices[c].bulk;
        let mut b: Vec<f64> = (0..np).map(|i| w[i] * (next[i] / dt + src[i])).collect();
        let jt = op.jacobian(pc).transpose();
        step_matrix(w, dt, &jt).factor()?.solve_in_place(&mut b);
        out.slices[c - 1].bulk = b;
        sync_trace(&mut out.slices[c - 1]);
    }
    Ok(out)
}

/// Solve the quasilinear cascade: `Ψ` by [`solve_quasilinear`] with zero
/// initial datum, then `H` backward with coefficients sampled from `Ψ`:
/// `−h_t − σ(ψ)Δh + a′(ψ)h = g + θψ 1_𝒪` and the matching surface row.
pub fn solve_quasilinear_cascade(
    op: &QuasilinearOperator,
    coupling: &ObservationCoupling,
    omega_nodes: &[bool],
    f: Option<&SpaceTimeField>,
    g: Option<&SpaceTimeField>,
    v: &SpaceTimeField,
) -> Result<CascadeSolution> {
    op.linear.check_shape(v)?;
    check_control_support(v, omega_nodes)?;
    if let Some(g) = g {
        op.linear.check_shape(g)?;
    }
    let zero = BulkSurfaceField::zeros(&op.grid);
    let psi = solve_quasilinear(op, f, &zero, Some(v), InitialGuess::Previous)?.psi;
    let h = backward_state_dependent(op, &psi, g, Some(coupling))?;
    Ok(CascadeSolution { psi, h })
}

/// Solve the sensitivity system `W(z_c − z_{c−1})/Δt + J(ψ_c) z_c = 0` with
/// `z_0` the Galerkin projection of the perturbation direction.
///
/// This is the linearization of the quasilinear flow with respect to its
/// initial datum; in continuous form
/// `z_t − ∇·(σ(ψ)∇z + σ′(ψ) z ∇ψ) + a′(ψ)z = 0`.
pub fn solve_sensitivity(
    op: &QuasilinearOperator,
    psi: &SpaceTimeField,
    direction: &BulkSurfaceField,
) -> Result<SpaceTimeField> {
    op.linear.check_shape(psi)?;
    if direction.bulk.len() != op.grid.nodes() {
        return Err(Error::GridMismatch(
            "perturbation direction node count".into(),
        ));
    }
    let m = op.time.steps();
    let np = op.grid.nodes();
    let dt = op.time.dt();
    let w = op.mass();
    let mut out = SpaceTimeField::zeros(&op.grid, &op.time, Alignment::Forward);
    out.slices[0].bulk = project(direction, &op.grid);
    sync_trace(&mut out.slices[0]);
    for c in 1..=m {
        let prev = &out.slices[c - 1].bulk;
        let mut b: Vec<f64> = (0..np).map(|i| w[i] * prev[i] / dt).collect();
        let jac = op.jacobian(&psi.cell(c).bulk);
        step_matrix(w, dt, &jac).factor()?.solve_in_place(&mut b);
        out.slices[c].bulk = b;
        sync_trace(&mut out.slices[c]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdecore::coefficients::CoefficientFn;

    fn op(coeffs: &CoefficientSet) -> QuasilinearOperator {
        let g = SpatialGrid::new(1.0, 24).unwrap();
        let t = TimeGrid::new(1.0, 20).unwrap();
        QuasilinearOperator::new(&g, &t, coeffs).unwrap()
    }

    #[test]
    fn jacobian_matches_differences() {
        let q = op(&CoefficientSet::logistic());
        let np = q.grid().nodes();
        let u: Vec<f64> = (0..np).map(|i| 0.4 * (0.5 * i as f64).sin()).collect();
        let phi: Vec<f64> = (0..np).map(|i| (1.1 * i as f64).cos()).collect();
        let e = 1e-6;
        let up: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a + e * b).collect();
        let um: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a - e * b).collect();
        let (np_, nm) = (q.apply_n(&up), q.apply_n(&um));
        let jphi = q.apply_j(&u, &phi);
        for i in 0..np {
            let fd = (np_[i] - nm[i]) / (2.0 * e);
            assert!((fd - jphi[i]).abs() < 1e-6 * (1.0 + fd.abs()), "row {i}");
        }
    }

    #[test]
    fn jt_derivative_matches_differences() {
        let q = op(&CoefficientSet::logistic());
        let np = q.grid().nodes();
        let u: Vec<f64> = (0..np).map(|i| 0.3 * (0.7 * i as f64).cos()).collect();
        let h: Vec<f64> = (0..np).map(|i| (0.2 * i as f64).sin()).collect();
        let phi: Vec<f64> = (0..np).map(|i| (1.3 * i as f64).sin()).collect();
        let e = 1e-6;
        let up: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a + e * b).collect();
        let um: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a - e * b).collect();
        let (a, b) = (q.apply_jt(&up, &h), q.apply_jt(&um, &h));
        let d = q.jt_derivative(&u, &h, &phi);
        for i in 0..np {
            let fd = (a[i] - b[i]) / (2.0 * e);
            assert!((fd - d[i]).abs() < 1e-6 * (1.0 + fd.abs()), "row {i}");
        }
    }

    #[test]
    fn linear_coefficients_reduce_to_frozen_stiffness() {
        let q = op(&CoefficientSet::linear(1.3, 1.0, 0.4, 0.2));
        let np = q.grid().nodes();
        let u: Vec<f64> = (0..np).map(|i| (0.3 * i as f64).sin()).collect();
        let mut ju = vec![0.0; np];
        q.frozen_stiffness().apply(&u, &mut ju);
        let nu = q.apply_n(&u);
        for i in 0..np {
            assert!((ju[i] - nu[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_decay_with_unit_reactions() {
        let mut c = CoefficientSet::logistic();
        c.a = CoefficientFn::affine(0.0, 1.0);
        c.b = CoefficientFn::affine(0.0, 1.0);
        let q = op(&c);
        let k = 0.3;
        let d = BulkSurfaceField::from_trace(vec![k; q.grid().nodes()]);
        let s = solve_quasilinear(&q, None, &d, None, InitialGuess::Previous).unwrap();
        let dt = q.time().dt();
        for (j, sl) in s.psi.slices.iter().enumerate() {
            let exact = k * (1.0 + dt).powi(-(j as i32));
            assert!(sl.bulk.iter().all(|x| (x - exact).abs() < 1e-12));
        }
    }

    #[test]
    fn large_data_trigger_smallness_error() {
        let mut c = CoefficientSet::logistic();
        c.a = CoefficientFn::Polynomial {
            coeffs: vec![0.0, 0.0, 0.0, -40.0],
            derivatives: None,
        };
        let q = op(&c);
        let d = BulkSurfaceField::from_trace(vec![30.0; q.grid().nodes()]);
        let err = solve_quasilinear(&q, None, &d, None, InitialGuess::Previous).unwrap_err();
        assert!(matches!(err, Error::Smallness(_)), "{err}");
    }
}
