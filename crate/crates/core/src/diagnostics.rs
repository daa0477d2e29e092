//! Verification diagnostics.
//!
//! Each diagnostic runs one self-contained numerical experiment and returns a
//! serializable report with the raw measurements and timings. Thresholds are
//! left to the caller: the CLI and the acceptance suite pin their own.
//!
//! * [`duality_check`]: `⟨LY, W⟩ = ⟨Y, L*W⟩` on random pairs.
//! * [`conservation_check`]: mass conservation and energy dissipation.
//! * [`convergence_check`]: manufactured-solution orders in space and time.
//! * [`uniqueness_check`]: Newton runs from different initial guesses.
//! * [`gradient_check`]: derivative of the nonlinear parts against differences.
//! * [`estimates_check`]: weighted estimate ratios under time refinement.
//! * [`carleman_check`]: empirical Carleman constants under refinement.
//! * [`null_reach_check`]: size of the backward state at `t = 0`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ficontrol::{verify_p1, verify_p2, FIProblem, FiSolver};
use crate::geometry::{
    l2_norm, st_inner, st_norm, sup_norm_in_time, Alignment, BulkSurfaceField, SpaceTimeField,
    SpatialGrid, TimeGrid,
};
use crate::insense::{apply_a_derivative, nonlinear_parts, y_norm};
use crate::pdecore::operators::{LinearOperatorSet, OperatorVariant};
use crate::pdecore::quasilinear::{solve_quasilinear, InitialGuess, QuasilinearOperator};
use crate::pdecore::solvers::{solve_linear_forward, solve_linearized_cascade};
use crate::scenario::{Scenario, ScenarioSpec};
use crate::sources::{generate, random_profile, SourceFamily, SourceSpec};
use crate::weights::{
    check_elementary_estimates, empirical_carleman_check, CarlemanKind, ElementaryEstimates,
};

fn seconds_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Random trace-compatible field with independent uniform nodal values in
/// `[−amplitude, amplitude]` and a zero datum slice.
pub fn random_field(
    grid: &SpatialGrid,
    time: &TimeGrid,
    alignment: Alignment,
    amplitude: f64,
    rng: &mut impl Rng,
) -> SpaceTimeField {
    let mut f = SpaceTimeField::zeros(grid, time, alignment);
    let datum = alignment.datum_slice(time.steps());
    for (j, s) in f.slices.iter_mut().enumerate() {
        if j == datum {
            continue;
        }
        let bulk = (0..grid.nodes())
            .map(|_| rng.gen_range(-amplitude..amplitude))
            .collect();
        *s = BulkSurfaceField::from_trace(bulk);
    }
    f
}

/// Random field that is smooth in space (low cosine modes, see
/// [`random_profile`]) and independent from slice to slice, scaled so that
/// each slice's largest value is at most `amplitude`. The datum slice is zero.
pub fn random_smooth_field(
    grid: &SpatialGrid,
    time: &TimeGrid,
    alignment: Alignment,
    amplitude: f64,
    modes: usize,
    rng: &mut impl Rng,
) -> SpaceTimeField {
    let mut f = SpaceTimeField::zeros(grid, time, alignment);
    let datum = alignment.datum_slice(time.steps());
    for (j, s) in f.slices.iter_mut().enumerate() {
        if j == datum {
            continue;
        }
        *s = random_profile(grid, modes, rng);
        let peak = s.max_abs();
        if peak > 0.0 {
            s.scale(amplitude / peak);
        }
    }
    f
}

fn difference(a: &SpaceTimeField, b: &SpaceTimeField) -> SpaceTimeField {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d
}

/// `next / previous`, with `0/0 = 0`.
fn reduction(previous: f64, next: f64) -> f64 {
    if previous > 0.0 {
        next / previous
    } else if next == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

// ---------------------------------------------------------------------------
// Duality

/// Outcome of the duality check.
#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// Number of random pairs.
    pub pairs: usize,
    /// Largest `|⟨LY, W⟩ − ⟨Y, L*W⟩| / (‖Y‖ ‖W‖)`.
    pub max_defect: f64,
    /// Mean of the same quantity.
    pub mean_defect: f64,
    /// Largest defect relative to `‖LY‖‖W‖ + ‖Y‖‖L*W‖`, the roundoff scale
    /// of the two inner products.
    pub max_defect_operator_scale: f64,
    /// Wall-clock time of the whole check.
    pub seconds: f64,
}

/// Compare `⟨LY, W⟩` with `⟨Y, L*W⟩` for random `Y` with zero initial slice
/// and random `W` with zero terminal slice, where the end terms vanish.
pub fn duality_check(ops: &LinearOperatorSet, pairs: usize, seed: u64) -> Result<DualityReport> {
    let start = Instant::now();
    let (g, t) = (ops.grid(), ops.time());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_defect, mut sum, mut max_op) = (0.0_f64, 0.0, 0.0_f64);
    for _ in 0..pairs {
        let y = random_field(g, t, Alignment::Forward, 1.0, &mut rng);
        let w = random_field(g, t, Alignment::Backward, 1.0, &mut rng);
        let ly = ops.apply_l(&y, OperatorVariant::Primal)?;
        let lw = ops.apply_l(&w, OperatorVariant::Adjoint)?;
        let defect = (st_inner(&ly, &w, g, t)? - st_inner(&y, &lw, g, t)?).abs();
        let (ny, nw) = (st_norm(&y, g, t)?, st_norm(&w, g, t)?);
        let rel = defect / (ny * nw);
        let op_scale = st_norm(&ly, g, t)? * nw + ny * st_norm(&lw, g, t)?;
        max_defect = max_defect.max(rel);
        max_op = max_op.max(defect / op_scale);
        sum += rel;
    }
    Ok(DualityReport {
        pairs,
        max_defect,
        mean_defect: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
        max_defect_operator_scale: max_op,
        seconds: seconds_since(start),
    })
}

// ---------------------------------------------------------------------------
// Conservation and dissipation

/// Outcome of the conservation check.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationReport {
    /// Number of time steps.
    pub steps: usize,
    /// Whether the linear solver was used (otherwise Newton's method).
    pub linear: bool,
    /// `∫_Ω ψ + ∫_Γ ψ_Γ` at `t = 0`.
    pub initial_mass: f64,
    /// Largest change of the mass over one step.
    pub max_mass_drift_per_step: f64,
    /// Largest relative increase `(‖ψ_c‖ − ‖ψ_{c−1}‖)/‖ψ_{c−1}‖` (negative
    /// when the norm strictly decreases at every step).
    pub max_relative_norm_increase: f64,
    /// `‖ψ_M‖ / ‖ψ_0‖`.
    pub final_norm_ratio: f64,
}

impl ConservationReport {
    /// Whether the norm never increases by more than `slack` (relative).
    pub fn norm_nonincreasing(&self, slack: f64) -> bool {
        self.max_relative_norm_increase <= slack
    }
}

/// Evolve `datum` with zero sources and no control and track the mass
/// `Σ_i W_i ψ_i` and the pair norm. Requires `a′(0) = b′(0) = 0`. The mass
/// is conserved exactly when the reactions vanish identically; higher-order
/// reaction terms show up as drift.
pub fn conservation_check(
    op: &QuasilinearOperator,
    datum: &BulkSurfaceField,
) -> Result<ConservationReport> {
    let c = op.coefficients();
    if c.a.d1(0.0) != 0.0 || c.b.d1(0.0) != 0.0 {
        return Err(Error::Contract(format!(
            "conservation needs a′(0) = b′(0) = 0, got a′(0) = {}, b′(0) = {}",
            c.a.d1(0.0),
            c.b.d1(0.0)
        )));
    }
    let linear = c.is_linear();
    let psi = if linear {
        let zero = SpaceTimeField::zeros(op.grid(), op.time(), Alignment::Forward);
        solve_linear_forward(op.linear(), &zero, datum)?
    } else {
        solve_quasilinear(op, None, datum, None, InitialGuess::Previous)?.psi
    };
    let w = op.mass();
    let mass = |s: &BulkSurfaceField| s.bulk.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>();
    let norm = |s: &BulkSurfaceField| {
        s.bulk
            .iter()
            .zip(w)
            .map(|(x, wi)| x * x * wi)
            .sum::<f64>()
            .sqrt()
    };
    let mut drift = 0.0_f64;
    let mut increase = f64::NEG_INFINITY;
    for pair in psi.slices.windows(2) {
        drift = drift.max((mass(&pair[1]) - mass(&pair[0])).abs());
        let (n0, n1) = (norm(&pair[0]), norm(&pair[1]));
        if n0 > 0.0 {
            increase = increase.max((n1 - n0) / n0);
        }
    }
    let m = psi.steps();
    Ok(ConservationReport {
        steps: m,
        linear,
        initial_mass: mass(&psi.slices[0]),
        max_mass_drift_per_step: drift,
        max_relative_norm_increase: increase,
        final_norm_ratio: reduction(norm(&psi.slices[0]), norm(&psi.slices[m])),
    })
}

// ---------------------------------------------------------------------------
// Manufactured-solution convergence

/// Parameters of the manufactured-solution study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Constant diffusion.
    pub sigma: f64,
    /// Bulk reaction slope.
    pub a1: f64,
    /// Surface reaction slope.
    pub b1: f64,
    /// Cell counts of the spatial study.
    pub spatial_cells: Vec<usize>,
    /// Step count of the spatial study (fine enough to hide the time error).
    pub fine_steps: usize,
    /// Step counts of the temporal study.
    pub temporal_steps: Vec<usize>,
    /// Cell count of the temporal study.
    pub fine_cells: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            a1: 0.5,
            b1: 0.3,
            spatial_cells: vec![32, 64, 128],
            fine_steps: 1 << 18,
            temporal_steps: vec![64, 128, 256],
            fine_cells: 512,
        }
    }
}

/// One resolution of the study.
#[derive(Debug, Clone, Serialize)]
pub struct MmsLevel {
    /// `N`.
    pub cells: usize,
    /// `M`.
    pub steps: usize,
    /// `max_j ‖ψ_j − ψ(t_j)‖` in the pair norm.
    pub error: f64,
}

/// Outcome of the manufactured-solution study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    /// The study parameters.
    pub config: ConvergenceConfig,
    /// Spatial refinement levels.
    pub spatial: Vec<MmsLevel>,
    /// `log₂(e_k / e_{k+1})` for consecutive spatial levels.
    pub spatial_orders: Vec<f64>,
    /// Temporal refinement levels.
    pub temporal: Vec<MmsLevel>,
    /// `log₂(e_k / e_{k+1})` for consecutive temporal levels.
    pub temporal_orders: Vec<f64>,
    /// Wall-clock time.
    pub seconds: f64,
}

impl ConvergenceReport {
    /// Smallest observed spatial order.
    pub fn min_spatial_order(&self) -> f64 {
        self.spatial_orders
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest observed temporal order.
    pub fn min_temporal_order(&self) -> f64 {
        self.temporal_orders
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Error of the implicit Euler solution against `ψ = e^{−t} cos(πx)` on
/// `(0, 1) × (0, 1)` with constant diffusion `σ` and linear reactions.
///
/// The exact solution has zero normal derivative, so the matching sources
/// are `f = e^{−t} cos(πx)(σπ² + a1 − 1)` in the bulk and
/// `f_Γ = e^{−t} cos(πx)(b1 − 1)` at both endpoints. Steps are taken one at
/// a time without storing the trajectory, so very fine time grids are cheap.
pub fn mms_error(sigma: f64, a1: f64, b1: f64, cells: usize, steps: usize) -> Result<f64> {
    use std::f64::consts::PI;
    let grid = SpatialGrid::new(1.0, cells)?;
    let time = TimeGrid::new(1.0, steps)?;
    let ops = LinearOperatorSet::frozen(&grid, &time, sigma, sigma, a1, b1)?;
    let np = grid.nodes();
    let w = ops.mass();
    let dt = time.dt();
    let shape: Vec<f64> = (0..np).map(|i| (PI * grid.x(i)).cos()).collect();
    // Galerkin-projected source per unit e^{−t}: W f = trapezoid·f_bulk + f_Γ.
    let src: Vec<f64> = (0..np)
        .map(|i| {
            let bulk = grid.trapezoid_weight(i) * shape[i] * (sigma * PI * PI + a1 - 1.0);
            let surface = if i == 0 || i == np - 1 {
                shape[i] * (b1 - 1.0)
            } else {
                0.0
            };
            bulk + surface
        })
        .collect();
    let mut psi = shape.clone();
    let mut worst = 0.0_f64;
    for c in 1..=steps {
        let decay = (-(c as f64) * dt).exp();
        let mut b: Vec<f64> = (0..np)
            .map(|i| w[i] * psi[i] / dt + decay * src[i])
            .collect();
        ops.solve_step(&mut b);
        psi = b;
        let err: f64 = (0..np)
            .map(|i| w[i] * (psi[i] - decay * shape[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    Ok(worst)
}

fn orders(levels: &[MmsLevel]) -> Vec<f64> {
    levels
        .windows(2)
        .map(|p| (p[0].error / p[1].error).log2())
        .collect()
}

/// Run the spatial and temporal refinement studies.
pub fn convergence_check(config: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let start = Instant::now();
    let level = |cells: usize, steps: usize| -> Result<MmsLevel> {
        Ok(MmsLevel {
            cells,
            steps,
            error: mms_error(config.sigma, config.a1, config.b1, cells, steps)?,
        })
    };
    let spatial = config
        .spatial_cells
        .iter()
        .map(|&n| level(n, config.fine_steps))
        .collect::<Result<Vec<_>>>()?;
    let temporal = config
        .temporal_steps
        .iter()
        .map(|&m| level(config.fine_cells, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        config: config.clone(),
        spatial_orders: orders(&spatial),
        temporal_orders: orders(&temporal),
        spatial,
        temporal,
        seconds: seconds_since(start),
    })
}

// ---------------------------------------------------------------------------
// Uniqueness

/// Outcome of the uniqueness check.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    /// Offset added to the first Newton iterate of every step in the second run.
    pub offset: f64,
    /// `max_j ‖ψ_j − ψ̃_j‖` in the pair norm.
    pub max_difference: f64,
    /// Total Newton iterations of the first run.
    pub iterations_previous: usize,
    /// Total Newton iterations of the second run.
    pub iterations_offset: usize,
}

/// Solve the quasilinear problem from a zero datum twice, once starting
/// every Newton iteration at the previous time slice and once at that slice
/// plus `offset`, and compare the two trajectories.
pub fn uniqueness_check(
    op: &QuasilinearOperator,
    f: &SpaceTimeField,
    offset: f64,
) -> Result<UniquenessReport> {
    let zero = BulkSurfaceField::zeros(op.grid());
    let a = solve_quasilinear(op, Some(f), &zero, None, InitialGuess::Previous)?;
    let b = solve_quasilinear(op, Some(f), &zero, None, InitialGuess::Offset(offset))?;
    Ok(UniquenessReport {
        offset,
        max_difference: sup_norm_in_time(&difference(&a.psi, &b.psi), op.grid()),
        iterations_previous: a.newton_iterations.iter().sum(),
        iterations_offset: b.newton_iterations.iter().sum(),
    })
}

// ---------------------------------------------------------------------------
// Derivative of the nonlinear parts

/// Outcome of the derivative check.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    /// Coefficient preset label.
    pub label: String,
    /// Central difference step.
    pub step: f64,
    /// Relative error on the state rows.
    pub rel_error_psi_rows: f64,
    /// Relative error on the adjoint rows.
    pub rel_error_h_rows: f64,
}

impl GradientReport {
    /// Larger of the two relative errors.
    pub fn max_rel_error(&self) -> f64 {
        self.rel_error_psi_rows.max(self.rel_error_h_rows)
    }
}

/// Compare the derivative of the nonlinear parts at a random base point and
/// direction with central differences of step `step`. Base fields have
/// slices of size `amplitude`, directions of size one.
pub fn gradient_check(
    label: &str,
    op: &QuasilinearOperator,
    amplitude: f64,
    step: f64,
    seed: u64,
) -> Result<GradientReport> {
    let (g, t) = (op.grid(), op.time());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = random_smooth_field(g, t, Alignment::Forward, amplitude, 4, &mut rng);
    let h = random_smooth_field(g, t, Alignment::Backward, amplitude, 4, &mut rng);
    let phi = random_smooth_field(g, t, Alignment::Forward, 1.0, 4, &mut rng);
    let k = random_smooth_field(g, t, Alignment::Backward, 1.0, 4, &mut rng);
    let exact = apply_a_derivative(op, &psi, &h, &phi, &k)?;
    let shifted = |s: f64| {
        let mut p = psi.clone();
        p.axpy(s, &phi);
        let mut q = h.clone();
        q.axpy(s, &k);
        nonlinear_parts(op, &p, &q)
    };
    let (plus, minus) = (shifted(step)?, shifted(-step)?);
    let rel = |p: &SpaceTimeField, m: &SpaceTimeField, d: &SpaceTimeField| -> Result<f64> {
        let mut fd = difference(p, m);
        fd.scale(0.5 / step);
        let scale = st_norm(d, g, t)?;
        let err = st_norm(&difference(&fd, d), g, t)?;
        Ok(if scale > 0.0 { err / scale } else { err })
    };
    Ok(GradientReport {
        label: label.to_string(),
        step,
        rel_error_psi_rows: rel(&plus.psi_rows, &minus.psi_rows, &exact.psi_rows)?,
        rel_error_h_rows: rel(&plus.h_rows, &minus.h_rows, &exact.h_rows)?,
    })
}

// ---------------------------------------------------------------------------
// Weighted estimates

/// Estimate ratios of one source draw at two time resolutions.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateDraw {
    /// Seed of the forward source (the backward source uses `seed + 1`).
    pub seed: u64,
    /// `log(LHS/RHS)` per estimate on the coarse grid.
    pub coarse: BTreeMap<String, f64>,
    /// `log(LHS/RHS)` per estimate on the refined grid.
    pub fine: BTreeMap<String, f64>,
    /// Largest `|Δ log ratio|` between the two grids.
    pub max_log_change: f64,
}

/// Outcome of the weighted-estimate study.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatesReport {
    /// `N`.
    pub cells: usize,
    /// Coarse `M`.
    pub coarse_steps: usize,
    /// Refined `M` (twice the coarse one).
    pub fine_steps: usize,
    /// One entry per draw.
    pub draws: Vec<EstimateDraw>,
    /// Whether every ratio is finite on both grids.
    pub all_finite: bool,
    /// Largest `|Δ log ratio|` over draws and estimates.
    pub max_log_change: f64,
    /// Largest `|Δ log|` of the empirical constants of the elementary weight
    /// inequalities.
    pub elementary_max_log_change: f64,
    /// Elementary weight inequalities on the coarse grid.
    pub elementary_coarse: ElementaryEstimates,
    /// Elementary weight inequalities on the refined grid.
    pub elementary_fine: ElementaryEstimates,
    /// Wall-clock time.
    pub seconds: f64,
}

fn estimate_ratios(
    solver: &FiSolver,
    source: &SourceSpec,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let s = solver.setup();
    let f = generate(source, s.grid(), s.time(), Alignment::Forward, seed)?;
    let g = generate(source, s.grid(), s.time(), Alignment::Backward, seed + 1)?;
    let problem = FIProblem::new(s, f, g)?;
    let sol = solver.solve(&problem)?;
    let p1 = verify_p1(&problem, &sol)?;
    let p2 = verify_p2(&problem, &sol)?;
    Ok([
        &p1.main,
        &p1.control_time_derivative,
        &p2.c25,
        &p2.c26,
        &p2.c27,
        &p2.c28,
    ]
    .into_iter()
    .map(|r| (r.name.clone(), r.log_ratio))
    .collect())
}

/// Solve the weighted problem for `draws` random source pairs on the grid of
/// `spec` and on the same grid with twice as many steps, and compare the
/// estimate ratios.
pub fn estimates_check(
    spec: &ScenarioSpec,
    source: &SourceSpec,
    draws: usize,
    seed: u64,
) -> Result<EstimatesReport> {
    let start = Instant::now();
    let coarse = Scenario::build(spec)?;
    let fine = Scenario::build(&spec.with_resolution(spec.grid.cells, 2 * spec.time.steps))?;
    let coarse_solver = FiSolver::new(&coarse.setup)?;
    let fine_solver = FiSolver::new(&fine.setup)?;
    let mut out = Vec::with_capacity(draws);
    let mut all_finite = true;
    let mut max_change = 0.0_f64;
    for k in 0..draws as u64 {
        let s = seed + 2 * k;
        let c = estimate_ratios(&coarse_solver, source, s)?;
        let f = estimate_ratios(&fine_solver, source, s)?;
        let mut change = 0.0_f64;
        for (name, lc) in &c {
            let lf = f[name];
            all_finite &= lc.is_finite() && lf.is_finite();
            change = change.max((lc - lf).abs());
        }
        max_change = max_change.max(change);
        out.push(EstimateDraw {
            seed: s,
            coarse: c,
            fine: f,
            max_log_change: change,
        });
    }
    let elementary_coarse = check_elementary_estimates(&coarse.setup.tables)?;
    let elementary_fine = check_elementary_estimates(&fine.setup.tables)?;
    let elementary_max_log_change = elementary_coarse
        .entries
        .iter()
        .zip(&elementary_fine.entries)
        .map(|(a, b)| (a.max_log_ratio - b.max_log_ratio).abs())
        .fold(0.0, f64::max);
    Ok(EstimatesReport {
        cells: spec.grid.cells,
        coarse_steps: spec.time.steps,
        fine_steps: 2 * spec.time.steps,
        draws: out,
        all_finite,
        max_log_change: max_change,
        elementary_max_log_change,
        elementary_coarse,
        elementary_fine,
        seconds: seconds_since(start),
    })
}

// ---------------------------------------------------------------------------
// Empirical Carleman constants

/// Empirical constant of one weighted functional at two resolutions.
#[derive(Debug, Clone, Serialize)]
pub struct CarlemanComparison {
    /// Functional.
    pub kind: CarlemanKind,
    /// `max log(LHS/RHS)` on the coarse grid.
    pub coarse_max_log_ratio: f64,
    /// `max log(LHS/RHS)` on the refined grid.
    pub fine_max_log_ratio: f64,
    /// `|difference|` of the two.
    pub log_change: f64,
}

/// Outcome of the empirical Carleman study.
#[derive(Debug, Clone, Serialize)]
pub struct CarlemanReport {
    /// Number of random source samples.
    pub samples: usize,
    /// Coarse `(N, M)`.
    pub coarse: (usize, usize),
    /// Refined `(N, M)`, both doubled.
    pub fine: (usize, usize),
    /// One comparison per functional.
    pub kinds: Vec<CarlemanComparison>,
    /// Wall-clock time.
    pub seconds: f64,
}

impl CarlemanReport {
    /// Whether every empirical constant is finite.
    pub fn all_finite(&self) -> bool {
        self.kinds
            .iter()
            .all(|k| k.coarse_max_log_ratio.is_finite() && k.fine_max_log_ratio.is_finite())
    }

    /// Largest change of a log constant under refinement.
    pub fn max_log_change(&self) -> f64 {
        self.kinds.iter().map(|k| k.log_change).fold(0.0, f64::max)
    }
}

/// Random smooth adjoint sources over the whole time interval.
fn carleman_source() -> SourceSpec {
    SourceSpec {
        family: SourceFamily::RandomSmooth { modes: 4 },
        amplitude: 1.0,
        onset: 0.0,
        ramp: 1e-3,
    }
}

fn carleman_max(scn: &Scenario, kind: CarlemanKind, samples: usize, seed: u64) -> Result<f64> {
    let (g, t) = (scn.grid(), scn.time());
    let spec = carleman_source();
    let pairs = (0..samples as u64)
        .map(|k| {
            Ok((
                generate(&spec, g, t, Alignment::Backward, seed + 2 * k)?,
                generate(&spec, g, t, Alignment::Forward, seed + 2 * k + 1)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = &scn.setup;
    Ok(
        empirical_carleman_check(kind, &pairs, &s.ops, &s.coupling, &s.masks, &s.tables)?
            .max_log_ratio,
    )
}

/// Evaluate both weighted functionals on `samples` random adjoint cascades on
/// the grid of `spec` and on the grid refined by two in space and time.
pub fn carleman_check(spec: &ScenarioSpec, samples: usize, seed: u64) -> Result<CarlemanReport> {
    let start = Instant::now();
    let fine_spec = spec.with_resolution(2 * spec.grid.cells, 2 * spec.time.steps);
    let coarse = Scenario::build(spec)?;
    let fine = Scenario::build(&fine_spec)?;
    let mut kinds = Vec::new();
    for kind in [CarlemanKind::Classical, CarlemanKind::Modified] {
        let c = carleman_max(&coarse, kind, samples, seed)?;
        let f = carleman_max(&fine, kind, samples, seed)?;
        kinds.push(CarlemanComparison {
            kind,
            coarse_max_log_ratio: c,
            fine_max_log_ratio: f,
            log_change: (c - f).abs(),
        });
    }
    Ok(CarlemanReport {
        samples,
        coarse: (spec.grid.cells, spec.time.steps),
        fine: (fine_spec.grid.cells, fine_spec.time.steps),
        kinds,
        seconds: seconds_since(start),
    })
}

// ---------------------------------------------------------------------------
// Null reach

/// Backward state at `t = 0` for one time resolution.
#[derive(Debug, Clone, Serialize)]
pub struct NullReachLevel {
    /// `M`.
    pub steps: usize,
    /// `‖H(·, 0)‖` of the triple recovered from the weighted problem.
    pub h0_recovered: f64,
    /// `‖h(·, 0)‖` of the linearized cascade re-solved with the control.
    pub h0_resolved: f64,
    /// `‖h(·, 0)‖ / ‖h‖_{L²(0,T)}` of the re-solved cascade.
    pub h0_resolved_relative: f64,
    /// `log ‖(F, G)‖_𝕐`.
    pub log_y_norm: f64,
    /// Wall-clock time of the solve.
    pub seconds: f64,
}

/// Outcome of the null-reach study.
#[derive(Debug, Clone, Serialize)]
pub struct NullReachReport {
    /// `N`.
    pub cells: usize,
    /// One entry per step count, in the given order.
    pub levels: Vec<NullReachLevel>,
    /// `h0_recovered` ratios between consecutive levels (`0/0 = 0`).
    pub recovered_reductions: Vec<f64>,
    /// `h0_resolved` ratios between consecutive levels.
    pub resolved_reductions: Vec<f64>,
}

/// Solve the linearized weighted problem for the same source (sampled on each
/// grid) at several step counts and report the backward state at `t = 0`.
pub fn null_reach_check(
    spec: &ScenarioSpec,
    source: &SourceSpec,
    steps: &[usize],
    seed: u64,
) -> Result<NullReachReport> {
    let mut levels = Vec::with_capacity(steps.len());
    for &m in steps {
        let start = Instant::now();
        let scn = Scenario::build(&spec.with_resolution(spec.grid.cells, m))?;
        let s = &scn.setup;
        let (g, t) = (s.grid(), s.time());
        let f = generate(source, g, t, Alignment::Forward, seed)?;
        let gsrc = SpaceTimeField::zeros(g, t, Alignment::Backward);
        let problem = FIProblem::new(s, f.clone(), gsrc.clone())?;
        let sol = FiSolver::new(s)?.solve(&problem)?;
        let re =
            solve_linearized_cascade(&s.ops, &s.coupling, &s.masks.omega_nodes, &f, &gsrc, &sol.v)?;
        let h0 = l2_norm(&re.h.slices[0], g);
        let h_total = st_norm(&re.h, g, t)?;
        levels.push(NullReachLevel {
            steps: m,
            h0_recovered: sol.h0_norm(g),
            h0_resolved: h0,
            h0_resolved_relative: reduction(h_total, h0),
            log_y_norm: y_norm(g, &s.tables, &f, &gsrc).log,
            seconds: seconds_since(start),
        });
    }
    let ratios = |get: fn(&NullReachLevel) -> f64| {
        levels
            .windows(2)
            .map(|p| reduction(get(&p[0]), get(&p[1])))
            .collect()
    };
    Ok(NullReachReport {
        cells: spec.grid.cells,
        recovered_reductions: ratios(|l| l.h0_recovered),
        resolved_reductions: ratios(|l| l.h0_resolved),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdecore::coefficients::{CoefficientFn, CoefficientSet};

    fn grids(n: usize, m: usize) -> (SpatialGrid, TimeGrid) {
        (
            SpatialGrid::new(1.0, n).unwrap(),
            TimeGrid::new(1.0, m).unwrap(),
        )
    }

    #[test]
    fn duality_is_exact_on_a_small_grid() {
        let (g, t) = grids(16, 12);
        let ops = LinearOperatorSet::frozen(&g, &t, 1.2, 1.0, 0.4, -0.3).unwrap();
        let r = duality_check(&ops, 10, 3).unwrap();
        assert!(r.max_defect < 1e-13, "{r:?}");
    }

    #[test]
    fn conservation_linear_and_quasilinear() {
        let (g, t) = grids(32, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let datum = random_profile(&g, 5, &mut rng);
        let lin =
            QuasilinearOperator::new(&g, &t, &CoefficientSet::linear(1.0, 1.0, 0.0, 0.0)).unwrap();
        let r = conservation_check(&lin, &datum).unwrap();
        assert!(r.linear && r.max_mass_drift_per_step < 1e-13, "{r:?}");
        assert!(r.norm_nonincreasing(0.0), "{r:?}");
        let mut c = CoefficientSet::logistic();
        c.a = CoefficientFn::constant(0.0);
        c.b = CoefficientFn::constant(0.0);
        let q = QuasilinearOperator::new(&g, &t, &c).unwrap();
        let r = conservation_check(&q, &datum).unwrap();
        assert!(!r.linear && r.max_mass_drift_per_step < 1e-12, "{r:?}");
        assert!(r.norm_nonincreasing(0.0), "{r:?}");
        let bad = QuasilinearOperator::new(&g, &t, &CoefficientSet::logistic()).unwrap();
        assert!(matches!(
            conservation_check(&bad, &datum),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn manufactured_solution_orders() {
        let e1 = mms_error(1.0, 0.5, 0.3, 16, 1 << 14).unwrap();
        let e2 = mms_error(1.0, 0.5, 0.3, 32, 1 << 14).unwrap();
        assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
        let t1 = mms_error(1.0, 0.5, 0.3, 256, 32).unwrap();
        let t2 = mms_error(1.0, 0.5, 0.3, 256, 64).unwrap();
        assert!((t1 / t2).log2() > 0.85, "{t1} {t2}");
    }

    #[test]
    fn uniqueness_and_gradient() {
        let (g, t) = grids(24, 20);
        let op = QuasilinearOperator::new(&g, &t, &CoefficientSet::logistic()).unwrap();
        let f = generate(&SourceSpec::random(0.5, 3), &g, &t, Alignment::Forward, 2).unwrap();
        let u = uniqueness_check(&op, &f, 0.2).unwrap();
        assert!(u.max_difference < 1e-10, "{u:?}");
        let r = gradient_check("logistic", &op, 0.3, 1e-5, 4).unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn reduction_convention() {
        assert_eq!(reduction(0.0, 0.0), 0.0);
        assert_eq!(reduction(2.0, 1.0), 0.5);
        assert!(reduction(0.0, 1.0).is_infinite());
    }
}
