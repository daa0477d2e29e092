//! Linear forward, backward and cascade solvers with frozen coefficients.
//!
//! Every solver is the exact inverse of the corresponding operator in
//! [`super::operators`]: a forward solve returns the field `Ψ` with
//! `LΨ = P(F)` cell by cell, where `P` is the Galerkin projection onto
//! trace-identified unknowns. Sources are read through their own alignment.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{project, Alignment, BulkSurfaceField, SpaceTimeField};
use crate::pdecore::operators::{sync_trace, LinearOperatorSet, ObservationCoupling};

fn check_datum(d: &BulkSurfaceField, ops: &LinearOperatorSet, what: &str) -> Result<()> {
    if d.bulk.len() != ops.grid().nodes() {
        return Err(Error::GridMismatch(format!(
            "{what} has the wrong node count"
        )));
    }
    if !d.is_trace_compatible(1e-12 * (1.0 + d.max_abs())) {
        return Err(Error::Contract(format!(
            "{what} must be trace-compatible (surface value = boundary trace)"
        )));
    }
    Ok(())
}

/// Solve `LΨ = F + extra` forward from `Ψ(0) = psi0`.
///
/// `extra` adds a per-cell source already expressed in trace-identified
/// unknowns (used for controls and couplings).
pub(crate) fn forward_with(
    ops: &LinearOperatorSet,
    f: Option<&SpaceTimeField>,
    psi0: &[f64],
    mut extra: impl FnMut(usize, &mut [f64]),
) -> SpaceTimeField {
    let m = ops.time().steps();
    let idt = 1.0 / ops.time().dt();
    let w = ops.mass();
    let mut out = SpaceTimeField::zeros(ops.grid(), ops.time(), Alignment::Forward);
    out.slices[0].bulk.copy_from_slice(psi0);
    sync_trace(&mut out.slices[0]);
    let np = ops.grid().nodes();
    let mut src = vec![0.0; np];
    for c in 1..=m {
        match f {
            Some(f) => src.copy_from_slice(&project(f.cell(c), ops.grid())),
            None => src.iter_mut().for_each(|s| *s = 0.0),
        }
        extra(c, &mut src);
        let prev = &out.slices[c - 1].bulk;
        let mut b: Vec<f64> = (0..np).map(|i| w[i] * (prev[i] * idt + src[i])).collect();
        ops.solve_step(&mut b);
        out.slices[c].bulk = b;
        sync_trace(&mut out.slices[c]);
    }
    out
}

/// Solve `L*H = G + extra` backward from `H(T) = terminal`.
pub(crate) fn backward_with(
    ops: &LinearOperatorSet,
    g: Option<&SpaceTimeField>,
    terminal: &[f64],
    mut extra: impl FnMut(usize, &mut [f64]),
) -> SpaceTimeField {
    let m = ops.time().steps();
    let idt = 1.0 / ops.time().dt();
    let w = ops.mass();
    let mut out = SpaceTimeField::zeros(ops.grid(), ops.time(), Alignment::Backward);
    out.slices[m].bulk.copy_from_slice(terminal);
    sync_trace(&mut out.slices[m]);
    let np = ops.grid().nodes();
    let mut src = vec![0.0; np];
    for c in (1..=m).rev() {
        match g {
            Some(g) => src.copy_from_slice(&project(g.cell(c), ops.grid())),
            None => src.iter_mut().for_each(|s| *s = 0.0),
        }
        extra(c, &mut src);
        let next = &out.slices[c].bulk;
        let mut b: Vec<f64> = (0..np).map(|i| w[i] * (next[i] * idt + src[i])).collect();
        ops.solve_step(&mut b);
        out.slices[c - 1].bulk = b;
        sync_trace(&mut out.slices[c - 1]);
    }
    out
}

/// Solve the linear forward problem `LΨ = F`, `Ψ(0) = Ψ₀`.
pub fn solve_linear_forward(
    ops: &LinearOperatorSet,
    f: &SpaceTimeField,
    psi0: &BulkSurfaceField,
) -> Result<SpaceTimeField> {
    ops.check_shape(f)?;
    check_datum(psi0, ops, "initial datum")?;
    Ok(forward_with(ops, Some(f), &psi0.bulk, |_, _| {}))
}

/// Solve the linear backward problem `L*H = G`, `H(T) = terminal`.
pub fn solve_linear_backward(
    ops: &LinearOperatorSet,
    g: &SpaceTimeField,
    terminal: &BulkSurfaceField,
) -> Result<SpaceTimeField> {
    ops.check_shape(g)?;
    check_datum(terminal, ops, "terminal datum")?;
    Ok(backward_with(ops, Some(g), &terminal.bulk, |_, _| {}))
}

/// Forward state and backward adjoint state of a cascade solve.
#[derive(Debug, Clone, Serialize)]
pub struct CascadeSolution {
    /// Forward state `Ψ`, zero initial datum.
    pub psi: SpaceTimeField,
    /// Backward state `H`, zero terminal datum.
    pub h: SpaceTimeField,
}

/// Check that a control vanishes outside the control region and has no
/// surface component.
pub fn check_control_support(v: &SpaceTimeField, omega_nodes: &[bool]) -> Result<()> {
    for (j, s) in v.slices.iter().enumerate() {
        if s.surface != [0.0, 0.0] {
            return Err(Error::Contract(format!(
                "control has a surface component at time node {j}; controls act in the bulk only"
            )));
        }
        for (i, (&val, &inside)) in s.bulk.iter().zip(omega_nodes).enumerate() {
            if val != 0.0 && !inside {
                return Err(Error::Contract(format!(
                    "control is nonzero at node {i} outside the control region (time node {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Solve the linearized cascade
///
/// ```text
/// LΨ  = F + v 1_ω,            Ψ(0) = 0,
/// L*H = G + B Ψ,              H(T) = 0,
/// ```
///
/// where `B = W⁻¹S` injects `θψ 1_𝒪` in the bulk and `θ_Γ ψ_Γ 1_Σ` on the
/// surface. The coupling at cell `c` uses the state of the same cell.
pub fn solve_linearized_cascade(
    ops: &LinearOperatorSet,
    coupling: &ObservationCoupling,
    omega_nodes: &[bool],
    f: &SpaceTimeField,
    g: &SpaceTimeField,
    v: &SpaceTimeField,
) -> Result<CascadeSolution> {
    ops.check_shape(f)?;
    ops.check_shape(g)?;
    ops.check_shape(v)?;
    check_control_support(v, omega_nodes)?;
    let zero = vec![0.0; ops.grid().nodes()];
    let psi = forward_with(ops, Some(f), &zero, |c, src| {
        for (s, x) in src.iter_mut().zip(&v.cell(c).bulk) {
            *s += x;
        }
    });
    let mass = ops.mass().to_vec();
    let h = backward_with(ops, Some(g), &zero, |c, src| {
        coupling.add_source(&mass, 1.0, &psi.cell(c).bulk, src);
    });
    Ok(CascadeSolution { psi, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SpatialGrid, TimeGrid};
    use crate::pdecore::operators::OperatorVariant;

    fn setup(a1: f64, b1: f64) -> LinearOperatorSet {
        let g = SpatialGrid::new(1.0, 20).unwrap();
        let t = TimeGrid::new(1.0, 16).unwrap();
        LinearOperatorSet::frozen(&g, &t, 1.0, 1.0, a1, b1).unwrap()
    }

    #[test]
    fn zero_data_gives_zero() {
        let ops = setup(0.3, 0.2);
        let f = SpaceTimeField::zeros(ops.grid(), ops.time(), Alignment::Forward);
        let z = BulkSurfaceField::zeros(ops.grid());
        assert!(solve_linear_forward(&ops, &f, &z).unwrap().is_zero());
        assert!(solve_linear_backward(&ops, &f, &z).unwrap().is_zero());
    }

    #[test]
    fn uniform_datum_decays_geometrically() {
        let rho0 = 0.7;
        let ops = setup(rho0, rho0);
        let k = 1.7;
        let f = SpaceTimeField::zeros(ops.grid(), ops.time(), Alignment::Forward);
        let d = BulkSurfaceField::from_trace(vec![k; ops.grid().nodes()]);
        let psi = solve_linear_forward(&ops, &f, &d).unwrap();
        let h = solve_linear_backward(&ops, &f, &d).unwrap();
        let dt = ops.time().dt();
        let m = ops.time().steps();
        for j in 0..=m {
            let fwd = k * (1.0 + rho0 * dt).powi(-(j as i32));
            let bwd = k * (1.0 + rho0 * dt).powi(-((m - j) as i32));
            for i in 0..ops.grid().nodes() {
                assert!((psi.slices[j].bulk[i] - fwd).abs() < 1e-13);
                assert!((h.slices[j].bulk[i] - bwd).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn solve_inverts_apply() {
        let ops = setup(0.5, -0.2);
        let f = SpaceTimeField::from_cell_fn(
            ops.grid(),
            ops.time(),
            Alignment::Forward,
            |x, t| (3.0 * x).sin() * (1.0 + t),
            |x, t| x - t,
        );
        let d = BulkSurfaceField::from_trace(
            (0..ops.grid().nodes())
                .map(|i| (i as f64 * 0.3).cos())
                .collect(),
        );
        let psi = solve_linear_forward(&ops, &f, &d).unwrap();
        let r = ops.apply_l(&psi, OperatorVariant::Primal).unwrap();
        for c in 1..=ops.time().steps() {
            let p = project(f.cell(c), ops.grid());
            for (a, b) in r.cell(c).bulk.iter().zip(&p) {
                assert!((a - b).abs() < 1e-11 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn backward_is_reversed_forward() {
        let ops = setup(0.4, 0.1);
        let m = ops.time().steps();
        let g = SpaceTimeField::from_cell_fn(
            ops.grid(),
            ops.time(),
            Alignment::Backward,
            |x, t| (x * t).cos(),
            |x, _| 1.0 + x,
        );
        let term = BulkSurfaceField::from_trace(
            (0..ops.grid().nodes()).map(|i| i as f64 * 0.01).collect(),
        );
        let h = solve_linear_backward(&ops, &g, &term).unwrap();
        // Reverse time: cell c of the backward problem is cell M+1−c forward.
        let mut fr = SpaceTimeField::zeros(ops.grid(), ops.time(), Alignment::Forward);
        for c in 1..=m {
            *fr.cell_mut(c) = g.cell(m + 1 - c).clone();
        }
        let psi = solve_linear_forward(&ops, &fr, &term).unwrap();
        for j in 0..=m {
            for (a, b) in h.slices[j].bulk.iter().zip(&psi.slices[m - j].bulk) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }
}
