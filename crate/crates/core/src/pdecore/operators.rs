//! Frozen-coefficient space-time operators `L = (L₁, L₂)` and their exact
//! discrete adjoints `L* = (L₁*, L₂*)`.
//!
//! In trace-identified unknowns the spatial part of `L` is `A = W⁻¹J₀` with
//! the symmetric tridiagonal
//!
//! ```text
//! J₀ = σ(0)·K + diag(h ω_i a′(0) + [i ∈ Γ] b′(0)),
//! ```
//!
//! where `K` is the face-flux stiffness `Σ_f (u_i − u_{i+1})²/h` and `W` is
//! the pair mass. The bulk row and the dynamic boundary row of a boundary node
//! are merged into a single Galerkin row, so `A` is self-adjoint in the
//! `W`-inner product and every duality identity holds to roundoff.
//!
//! Time is discretized by implicit Euler on the cells `c = 1..=M`:
//!
//! ```text
//! (L Y)_c  = (y_c − y_{c−1})/Δt + A y_c         (forward, datum y_0)
//! (L* W)_c = (w_{c−1} − w_c)/Δt + A w_{c−1}      (backward, datum w_M)
//! ```
//!
//! and `⟨LY, W⟩ − ⟨Y, L*W⟩ = ⟨y_M, w_M⟩ − ⟨y_0, w_0⟩` exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    Alignment, BulkSurfaceField, EndpointSet, SpaceTimeField, SpatialGrid, TimeGrid,
};
use crate::linalg::{Tridiag, TridiagLu};
use crate::pdecore::coefficients::CoefficientSet;

/// Which member of the operator pair to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorVariant {
    /// Forward operator `(L₁, L₂)`.
    Primal,
    /// Backward adjoint `(L₁*, L₂*)`.
    Adjoint,
}

/// Frozen-coefficient operators on fixed space and time grids.
#[derive(Debug, Clone)]
pub struct LinearOperatorSet {
    grid: SpatialGrid,
    time: TimeGrid,
    sigma0: f64,
    delta0: f64,
    a1: f64,
    b1: f64,
    mass: Vec<f64>,
    stiffness: Tridiag,
    step: TridiagLu,
}

/// Stiffness matrix for face diffusivities `face_sigma` plus the nodal
/// reaction diagonal `h ω_i react_bulk[i] + [i ∈ Γ] react_surface`.
pub(crate) fn assemble_stiffness(
    grid: &SpatialGrid,
    face_sigma: &[f64],
    react_bulk: &[f64],
    react_surface: [f64; 2],
) -> Tridiag {
    let n = grid.cells();
    let ih = 1.0 / grid.spacing();
    let mut j = Tridiag::zeros(n + 1);
    for (f, s) in face_sigma.iter().enumerate() {
        let k = s * ih;
        j.diag[f] += k;
        j.diag[f + 1] += k;
        j.upper[f] -= k;
        j.lower[f] -= k;
    }
    for i in 0..=n {
        j.diag[i] += grid.trapezoid_weight(i) * react_bulk[i];
    }
    j.diag[0] += react_surface[0];
    j.diag[n] += react_surface[1];
    j
}

/// Implicit Euler step matrix `W/Δt + J`.
pub(crate) fn step_matrix(mass: &[f64], dt: f64, j: &Tridiag) -> Tridiag {
    let mut m = j.clone();
    m.add_diagonal(1.0 / dt, mass);
    m
}

impl LinearOperatorSet {
    /// Operators with coefficients frozen at zero state:
    /// `σ(0)`, `δ(0)`, `a′(0)`, `b′(0)`.
    pub fn new(grid: &SpatialGrid, time: &TimeGrid, coeffs: &CoefficientSet) -> Result<Self> {
        Self::frozen(
            grid,
            time,
            coeffs.sigma.value(0.0),
            coeffs.delta.value(0.0),
            coeffs.a.d1(0.0),
            coeffs.b.d1(0.0),
        )
    }

    /// Operators with explicitly given frozen coefficients.
    pub fn frozen(
        grid: &SpatialGrid,
        time: &TimeGrid,
        sigma0: f64,
        delta0: f64,
        a1: f64,
        b1: f64,
    ) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Coefficient {
                assumption: "A7",
                message: format!("frozen diffusion σ(0) = {sigma0} must be positive"),
            });
        }
        if !(a1.is_finite() && b1.is_finite() && delta0.is_finite()) {
            return Err(Error::Coefficient {
                assumption: "A8",
                message: "frozen reaction slopes must be finite".into(),
            });
        }
        let n = grid.cells();
        let mass = grid.mass_diagonal();
        let stiffness = assemble_stiffness(grid, &vec![sigma0; n], &vec![a1; n + 1], [b1, b1]);
        let step = step_matrix(&mass, time.dt(), &stiffness).factor()?;
        Ok(Self {
            grid: grid.clone(),
            time: time.clone(),
            sigma0,
            delta0,
            a1,
            b1,
            mass,
            stiffness,
            step,
        })
    }

    /// Spatial grid.
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Time grid.
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    /// Frozen coefficients `(σ(0), δ(0), a′(0), b′(0))`.
    pub fn frozen_coefficients(&self) -> (f64, f64, f64, f64) {
        (self.sigma0, self.delta0, self.a1, self.b1)
    }

    /// Diagonal pair mass `W`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Symmetric stiffness `J₀`.
    pub fn stiffness(&self) -> &Tridiag {
        &self.stiffness
    }

    /// `out = A y = W⁻¹ J₀ y`.
    pub fn apply_spatial(&self, y: &[f64], out: &mut [f64]) {
        self.stiffness.apply(y, out);
        for (o, w) in out.iter_mut().zip(&self.mass) {
            *o /= w;
        }
    }

    /// Solve the implicit Euler step system `(W/Δt + J₀) x = b` in place.
    pub(crate) fn solve_step(&self, b: &mut [f64]) {
        self.step.solve_in_place(b);
    }

    /// Apply `L` (forward alignment) or `L*` (backward alignment).
    ///
    /// The input must be trace-compatible; its datum slice (slice 0 for `L`,
    /// slice `M` for `L*`) enters only through the first time difference. The
    /// result stores one residual per cell with the same alignment as the
    /// input, and a zero datum slice. Residual slices are trace-compatible:
    /// the boundary entry is the merged bulk/surface Galerkin row.
    pub fn apply_l(&self, y: &SpaceTimeField, variant: OperatorVariant) -> Result<SpaceTimeField> {
        self.check_field(y)?;
        let expected = match variant {
            OperatorVariant::Primal => Alignment::Forward,
            OperatorVariant::Adjoint => Alignment::Backward,
        };
        if y.alignment != expected {
            return Err(Error::Contract(format!(
                "{variant:?} operator expects a {expected:?}-aligned field"
            )));
        }
        for s in &y.slices {
            if !s.is_trace_compatible(1e-12 * (1.0 + s.max_abs())) {
                return Err(Error::Contract(
                    "operator argument must be trace-compatible (surface value = boundary trace)"
                        .into(),
                ));
            }
        }
        Ok(match variant {
            OperatorVariant::Primal => self.apply_primal_unchecked(y),
            OperatorVariant::Adjoint => self.apply_adjoint_unchecked(y),
        })
    }

    pub(crate) fn apply_primal_unchecked(&self, y: &SpaceTimeField) -> SpaceTimeField {
        let m = self.time.steps();
        let idt = 1.0 / self.time.dt();
        let np = self.grid.nodes();
        let mut out = SpaceTimeField::zeros(&self.grid, &self.time, Alignment::Forward);
        let mut ay = vec![0.0; np];
        for c in 1..=m {
            let (prev, cur) = (&y.slices[c - 1].bulk, &y.slices[c].bulk);
            self.apply_spatial(cur, &mut ay);
            let o = &mut out.slices[c].bulk;
            for i in 0..np {
                o[i] = (cur[i] - prev[i]) * idt + ay[i];
            }
            sync_trace(&mut out.slices[c]);
        }
        out
    }

    pub(crate) fn apply_adjoint_unchecked(&self, w: &SpaceTimeField) -> SpaceTimeField {
        let m = self.time.steps();
        let idt = 1.0 / self.time.dt();
        let np = self.grid.nodes();
        let mut out = SpaceTimeField::zeros(&self.grid, &self.time, Alignment::Backward);
        let mut aw = vec![0.0; np];
        for c in 1..=m {
            let (prev, cur) = (&w.slices[c - 1].bulk, &w.slices[c].bulk);
            self.apply_spatial(prev, &mut aw);
            let o = &mut out.slices[c - 1].bulk;
            for i in 0..np {
                o[i] = (prev[i] - cur[i]) * idt + aw[i];
            }
            sync_trace(&mut out.slices[c - 1]);
        }
        out
    }

    fn check_field(&self, y: &SpaceTimeField) -> Result<()> {
        if y.steps() != self.time.steps() {
            return Err(Error::GridMismatch(format!(
                "field has {} steps, operator has {}",
                y.steps(),
                self.time.steps()
            )));
        }
        if y.slices.iter().any(|s| s.bulk.len() != self.grid.nodes()) {
            return Err(Error::GridMismatch(format!(
                "field slices do not have {} nodes",
                self.grid.nodes()
            )));
        }
        Ok(())
    }

    /// Check shape compatibility of a field with the operator grids.
    pub fn check_shape(&self, y: &SpaceTimeField) -> Result<()> {
        self.check_field(y)
    }
}

/// Copy the end bulk values into the surface slots.
pub(crate) fn sync_trace(f: &mut BulkSurfaceField) {
    let n = f.bulk.len() - 1;
    f.surface = [f.bulk[0], f.bulk[n]];
}

/// Observation coupling `S = diag(h ω_i θ 1_𝒪(x_i) + [i ∈ Σ] θ_Γ)`.
///
/// `B = W⁻¹S` maps a state to the source it induces in the backward
/// equation, and `½ Σ_c Δt ψ_cᵀ S ψ_c` is the discrete energy functional.
#[derive(Debug, Clone, Serialize)]
pub struct ObservationCoupling {
    /// Bulk weight `θ > 0`.
    pub theta: f64,
    /// Surface weight `θ_Γ ≥ 0`.
    pub theta_gamma: f64,
    /// Diagonal of `S`.
    pub s_diag: Vec<f64>,
}

impl ObservationCoupling {
    /// Build the coupling from the bulk observation mask and boundary set.
    pub fn new(
        grid: &SpatialGrid,
        obs_nodes: &[bool],
        obs_surface: EndpointSet,
        theta: f64,
        theta_gamma: f64,
    ) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::Config(format!(
                "functional weight θ must be positive (A1), got {theta}"
            )));
        }
        if !(theta_gamma.is_finite() && theta_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "functional weight θ_Γ must be nonnegative (A1), got {theta_gamma}"
            )));
        }
        if obs_nodes.len() != grid.nodes() {
            return Err(Error::GridMismatch("observation mask length".into()));
        }
        let n = grid.cells();
        let mut s_diag: Vec<f64> = (0..=n)
            .map(|i| {
                if obs_nodes[i] {
                    theta * grid.trapezoid_weight(i)
                } else {
                    0.0
                }
            })
            .collect();
        let flags = obs_surface.flags();
        if flags[0] {
            s_diag[0] += theta_gamma;
        }
        if flags[1] {
            s_diag[n] += theta_gamma;
        }
        Ok(Self {
            theta,
            theta_gamma,
            s_diag,
        })
    }

    /// `out += c · W⁻¹ S y`.
    pub fn add_source(&self, mass: &[f64], c: f64, y: &[f64], out: &mut [f64]) {
        for i in 0..y.len() {
            out[i] += c * self.s_diag[i] * y[i] / mass[i];
        }
    }

    /// `yᵀ S z`.
    pub fn pairing(&self, y: &[f64], z: &[f64]) -> f64 {
        crate::linalg::wdot(y, &self.s_diag, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::st_inner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(
        rng: &mut ChaCha8Rng,
        g: &SpatialGrid,
        t: &TimeGrid,
        al: Alignment,
    ) -> SpaceTimeField {
        let mut f = SpaceTimeField::zeros(g, t, al);
        for s in f.slices.iter_mut() {
            for v in s.bulk.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            sync_trace(s);
        }
        f
    }

    #[test]
    fn stiffness_is_symmetric_with_zero_row_sums() {
        let g = SpatialGrid::new(1.0, 12).unwrap();
        let t = TimeGrid::new(1.0, 8).unwrap();
        let ops = LinearOperatorSet::frozen(&g, &t, 1.3, 1.0, 0.0, 0.0).unwrap();
        let j = ops.stiffness();
        assert_eq!(j.lower, j.upper);
        let ones = vec![1.0; g.nodes()];
        let mut out = vec![0.0; g.nodes()];
        j.apply(&ones, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn boundary_row_matches_sbp_combination() {
        // h ω_0 (−σ Δ_h y)_0 + σ ∂_ν y_0 equals the merged boundary row.
        let g = SpatialGrid::new(1.0, 10).unwrap();
        let t = TimeGrid::new(1.0, 8).unwrap();
        let sigma = 0.8;
        let ops = LinearOperatorSet::frozen(&g, &t, sigma, 1.0, 0.0, 0.0).unwrap();
        let y: Vec<f64> = (0..g.nodes()).map(|i| (0.9 * i as f64).sin()).collect();
        let mut jy = vec![0.0; g.nodes()];
        ops.stiffness().apply(&y, &mut jy);
        let lap = crate::geometry::sbp_laplacian(&y, &g).unwrap();
        let nd = crate::geometry::normal_derivative(&y, &g).unwrap();
        let n = g.cells();
        let left = -sigma * g.trapezoid_weight(0) * lap[0] + sigma * nd[0];
        let right = -sigma * g.trapezoid_weight(n) * lap[n] + sigma * nd[1];
        assert!((jy[0] - left).abs() < 1e-12);
        assert!((jy[n] - right).abs() < 1e-12);
        for i in 1..n {
            assert!((jy[i] + sigma * g.spacing() * lap[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn duality_holds_with_end_terms() {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        let t = TimeGrid::new(0.7, 12).unwrap();
        let ops = LinearOperatorSet::frozen(&g, &t, 1.1, 1.0, 0.4, -0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_field(&mut rng, &g, &t, Alignment::Forward);
        let w = random_field(&mut rng, &g, &t, Alignment::Backward);
        let ly = ops.apply_l(&y, OperatorVariant::Primal).unwrap();
        let lw = ops.apply_l(&w, OperatorVariant::Adjoint).unwrap();
        let lhs = st_inner(&ly, &w, &g, &t).unwrap() - st_inner(&y, &lw, &g, &t).unwrap();
        let m = t.steps();
        let ends = crate::geometry::l2_inner(&y.slices[m], &w.slices[m], &g).unwrap()
            - crate::geometry::l2_inner(&y.slices[0], &w.slices[0], &g).unwrap();
        assert!((lhs - ends).abs() < 1e-10, "{lhs} vs {ends}");
    }

    #[test]
    fn constants_are_in_the_kernel() {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        let t = TimeGrid::new(1.0, 8).unwrap();
        let ops = LinearOperatorSet::frozen(&g, &t, 1.0, 1.0, 0.0, 0.0).unwrap();
        let mut y = SpaceTimeField::zeros(&g, &t, Alignment::Forward);
        for s in y.slices.iter_mut() {
            *s = BulkSurfaceField::from_trace(vec![2.5; g.nodes()]);
        }
        let r = ops.apply_l(&y, OperatorVariant::Primal).unwrap();
        assert!(r.max_abs() < 1e-10);
    }

    #[test]
    fn rejects_misaligned_or_incompatible_input() {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        let t = TimeGrid::new(1.0, 8).unwrap();
        let ops = LinearOperatorSet::frozen(&g, &t, 1.0, 1.0, 0.0, 0.0).unwrap();
        let y = SpaceTimeField::zeros(&g, &t, Alignment::Backward);
        assert!(ops.apply_l(&y, OperatorVariant::Primal).is_err());
        let mut y = SpaceTimeField::zeros(&g, &t, Alignment::Forward);
        y.slices[3].surface[1] = 1.0;
        assert!(matches!(
            ops.apply_l(&y, OperatorVariant::Primal),
            Err(Error::Contract(_))
        ));
    }
}
