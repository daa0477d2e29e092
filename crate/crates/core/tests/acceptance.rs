//! Acceptance suite.
//!
//! Runs the eleven acceptance experiments and prints one `PASS` or `FAIL`
//! line per criterion with the measured quantities. Every tolerance is a
//! named constant below. The process exits with status 1 if any criterion
//! fails.

use std::process::ExitCode;
use std::time::Instant;

use insens_core::diagnostics::{
    carleman_check, conservation_check, convergence_check, duality_check, estimates_check,
    gradient_check, null_reach_check, uniqueness_check, ConvergenceConfig,
};
use insens_core::ficontrol::{cascade_residual, optimality_check, FIProblem, FiSolver};
use insens_core::insense::{
    insensitivity_check, synthesize, EnergySetup, LoopStatus, PerturbationSpec, DEFAULT_LADDER,
};
use insens_core::pdecore::coefficients::{CoefficientFn, CoefficientSet};
use insens_core::pdecore::quasilinear::QuasilinearOperator;
use insens_core::scenario::{polynomial_coefficients, Scenario, ScenarioSpec};
use insens_core::sources::{generate, random_profile, SourceSpec};
use insens_core::{Alignment, Result, SpaceTimeField, SpatialGrid, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// C1
const DUALITY_PAIRS: usize = 100;
const DUALITY_TOL: f64 = 1e-13;
const DUALITY_SECONDS: f64 = 5.0;
// C2
const MASS_DRIFT_TOL: f64 = 1e-12;
/// Relative slack allowed on "nonincreasing" for roundoff in the norm.
const DISSIPATION_SLACK: f64 = 1e-14;
// C3
const SPATIAL_ORDER_MIN: f64 = 1.9;
const TEMPORAL_ORDER_MIN: f64 = 0.9;
// C4
const OPTIMALITY_DIRECTIONS: usize = 20;
const OPTIMALITY_FACTOR: f64 = 10.0;
const CASCADE_RESIDUAL_TOL: f64 = 1e-8;
const FI_SECONDS: f64 = 60.0;
// C5
const NULL_REACH_REDUCTION: f64 = 3.0;
const NULL_REACH_RELATIVE: f64 = 1e-3;
// C6, C7
const REFINEMENT_FACTOR: f64 = 2.0;
const ESTIMATE_DRAWS: usize = 10;
const CARLEMAN_SAMPLES: usize = 50;
// C8
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_TOL: f64 = 1e-6;
// C9
const LOOP_AMPLITUDE: f64 = 1e-3;
const LOOP_DRAWS: u64 = 5;
const LOOP_MAX_ITERATIONS: usize = 10;
const LOOP_MAX_RATIO: f64 = 0.5;
const CONTROL_RATIO_SPREAD: f64 = 3.0;
// C10
const INSENSITIVITY_DIRECTIONS: usize = 5;
const INSENSITIVITY_TOL: f64 = 1e-4;
// C11
const UNIQUENESS_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn c1() -> Result<Outcome> {
    let scn = Scenario::build(&ScenarioSpec::reference(64, 128))?;
    let r = duality_check(&scn.setup.ops, DUALITY_PAIRS, 1)?;
    outcome(
        r.max_defect <= DUALITY_TOL && r.seconds < DUALITY_SECONDS,
        format!(
            "max |<LY,W> - <Y,L*W>|/(|Y||W|) = {:.3e} (tol {DUALITY_TOL:e}) over {} pairs, \
             operator-scaled {:.3e}, {:.3} s (limit {DUALITY_SECONDS} s)",
            r.max_defect, r.pairs, r.max_defect_operator_scale, r.seconds
        ),
    )
}

fn c2() -> Result<Outcome> {
    let g = SpatialGrid::new(1.0, 64)?;
    let t = TimeGrid::new(1.0, 128)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let datum = random_profile(&g, 6, &mut rng);
    let linear = CoefficientSet::linear(1.0, 1.0, 0.0, 0.0);
    let mut quasi = CoefficientSet::logistic();
    quasi.a = CoefficientFn::constant(0.0);
    quasi.b = CoefficientFn::constant(0.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, c) in [("linear", linear), ("quasilinear", quasi)] {
        let op = QuasilinearOperator::new(&g, &t, &c)?;
        let r = conservation_check(&op, &datum)?;
        pass &=
            r.max_mass_drift_per_step <= MASS_DRIFT_TOL && r.norm_nonincreasing(DISSIPATION_SLACK);
        parts.push(format!(
            "{label}: drift/step {:.2e}, max rel norm change {:.2e}, |psi_M|/|psi_0| {:.3e}",
            r.max_mass_drift_per_step, r.max_relative_norm_increase, r.final_norm_ratio
        ));
    }
    outcome(
        pass,
        format!(
            "{} (tol {MASS_DRIFT_TOL:e}, slack {DISSIPATION_SLACK:e})",
            parts.join("; ")
        ),
    )
}

fn c3() -> Result<Outcome> {
    let r = convergence_check(&ConvergenceConfig::default())?;
    let fmt = |l: &[insens_core::diagnostics::MmsLevel]| {
        l.iter()
            .map(|x| format!("{}x{}:{:.3e}", x.cells, x.steps, x.error))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        r.min_spatial_order() >= SPATIAL_ORDER_MIN && r.min_temporal_order() >= TEMPORAL_ORDER_MIN,
        format!(
            "spatial orders {:?} (min {SPATIAL_ORDER_MIN}) [{}]; temporal orders {:?} (min {TEMPORAL_ORDER_MIN}) [{}]",
            r.spatial_orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>(),
            fmt(&r.spatial),
            r.temporal_orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>(),
            fmt(&r.temporal)
        ),
    )
}

fn c4() -> Result<Outcome> {
    let scn = Scenario::build(&ScenarioSpec::reference(64, 128))?;
    let s = &scn.setup;
    let f = generate(
        &SourceSpec::random(LOOP_AMPLITUDE, 3),
        s.grid(),
        s.time(),
        Alignment::Forward,
        4,
    )?;
    let g = generate(
        &SourceSpec::random(LOOP_AMPLITUDE, 3),
        s.grid(),
        s.time(),
        Alignment::Backward,
        5,
    )?;
    let start = Instant::now();
    let problem = FIProblem::new(s, f, g)?;
    let sol = FiSolver::new(s)?.solve(&problem)?;
    let seconds = start.elapsed().as_secs_f64();
    let opt = optimality_check(&problem, &sol, OPTIMALITY_DIRECTIONS, 9);
    let res = cascade_residual(&problem, &sol)?;
    let tol = OPTIMALITY_FACTOR * s.cg.tol;
    outcome(
        opt.max_normalized_defect <= tol && res <= CASCADE_RESIDUAL_TOL && seconds <= FI_SECONDS,
        format!(
            "Galerkin defect/(|d|_B |x|_B) = {:.3e} (tol {tol:e}), defect/|d|_B = {:.3e}; \
             cascade residual {res:.3e} (tol {CASCADE_RESIDUAL_TOL:e}); solve {seconds:.2} s (limit {FI_SECONDS} s)",
            opt.max_normalized_defect, opt.max_defect
        ),
    )
}

fn c5() -> Result<Outcome> {
    let spec = ScenarioSpec::reference(64, 256);
    let r = null_reach_check(
        &spec,
        &SourceSpec::random(LOOP_AMPLITUDE, 3),
        &[64, 128, 256],
        6,
    )?;
    let limit = 1.0 / NULL_REACH_REDUCTION;
    let last = r.levels.last().expect("three levels");
    let bound_ok = last.h0_recovered == 0.0
        || last.h0_recovered.ln() <= NULL_REACH_RELATIVE.ln() + last.log_y_norm;
    let pass = r.recovered_reductions.iter().all(|&x| x <= limit) && bound_ok;
    let levels: Vec<String> = r
        .levels
        .iter()
        .map(|l| {
            format!(
                "M={}: |H(0)| {:.3e}, re-solved |h(0)| {:.3e} (relative {:.3e}), log|(F,G)|_Y {:.1}",
                l.steps, l.h0_recovered, l.h0_resolved, l.h0_resolved_relative, l.log_y_norm
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "recovered ratios {:?} (max {limit:.3}), re-solved ratios {:?}; {}",
            r.recovered_reductions,
            r.resolved_reductions,
            levels.join("; ")
        ),
    )
}

fn c6() -> Result<Outcome> {
    let r = estimates_check(
        &ScenarioSpec::reference(32, 64),
        &SourceSpec::random(LOOP_AMPLITUDE, 3),
        ESTIMATE_DRAWS,
        100,
    )?;
    let limit = REFINEMENT_FACTOR.ln();
    let first = &r.draws[0];
    outcome(
        r.all_finite && r.max_log_change <= limit,
        format!(
            "{} draws at N={}, M={} -> {}: all finite {}, max |d log ratio| {:.3} (limit ln 2 = {limit:.3}); \
             elementary max |d log| {:.3}; baseline draw 0 coarse {:?}",
            r.draws.len(),
            r.cells,
            r.coarse_steps,
            r.fine_steps,
            r.all_finite,
            r.max_log_change,
            r.elementary_max_log_change,
            first.coarse.iter().map(|(k, v)| format!("{k}={v:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn c7() -> Result<Outcome> {
    let r = carleman_check(&ScenarioSpec::reference(64, 128), CARLEMAN_SAMPLES, 200)?;
    let limit = REFINEMENT_FACTOR.ln();
    let kinds: Vec<String> = r
        .kinds
        .iter()
        .map(|k| {
            format!(
                "{:?}: log C {:.3} -> {:.3}",
                k.kind, k.coarse_max_log_ratio, k.fine_max_log_ratio
            )
        })
        .collect();
    outcome(
        r.all_finite() && r.max_log_change() <= limit,
        format!(
            "{} samples, {:?} -> {:?}: {}; max |d log C| {:.3} (limit {limit:.3})",
            r.samples,
            r.coarse,
            r.fine,
            kinds.join(", "),
            r.max_log_change()
        ),
    )
}

fn c8() -> Result<Outcome> {
    let g = SpatialGrid::new(1.0, 32)?;
    let t = TimeGrid::new(1.0, 24)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, c) in [
        ("logistic", CoefficientSet::logistic()),
        ("polynomial", polynomial_coefficients()),
    ] {
        let op = QuasilinearOperator::new(&g, &t, &c)?;
        let r = gradient_check(label, &op, 0.3, GRADIENT_STEP, 8)?;
        pass &= r.max_rel_error() <= GRADIENT_TOL;
        parts.push(format!(
            "{label}: psi rows {:.2e}, h rows {:.2e}",
            r.rel_error_psi_rows, r.rel_error_h_rows
        ));
    }
    outcome(
        pass,
        format!(
            "{} (step {GRADIENT_STEP:e}, tol {GRADIENT_TOL:e})",
            parts.join("; ")
        ),
    )
}

fn c9_c10() -> Result<(Outcome, Outcome)> {
    let scn = Scenario::build(&ScenarioSpec::reference(32, 64))?;
    let s = &scn.setup;
    let solver = FiSolver::new(s)?;
    let zero_g = SpaceTimeField::zeros(s.grid(), s.time(), Alignment::Backward);
    let mut pass = true;
    let mut ratios = Vec::new();
    let mut lines = Vec::new();
    let mut first = None;
    for seed in 0..LOOP_DRAWS {
        let f = generate(
            &SourceSpec::random(LOOP_AMPLITUDE, 3),
            s.grid(),
            s.time(),
            Alignment::Forward,
            300 + seed,
        )?;
        let r = synthesize(&solver, &scn.op, &f, &zero_g, &scn.spec.outer)?;
        let max_ratio = r.max_increment_ratio();
        pass &= r.status == LoopStatus::Converged
            && r.iterations <= LOOP_MAX_ITERATIONS
            && max_ratio <= LOOP_MAX_RATIO;
        ratios.push(r.log_control_ratio);
        lines.push(format!(
            "draw {seed}: {} its, max ratio {max_ratio:.3e}, log(|v|/|F|_Y) = {:.4}",
            r.iterations, r.log_control_ratio
        ));
        if first.is_none() {
            first = Some((f, r));
        }
    }
    // The ratios are far below the smallest normal double, so compare logs.
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let spread = (hi - lo).exp();
    pass &= spread <= CONTROL_RATIO_SPREAD;
    let c9 = Outcome {
        pass,
        detail: format!(
            "{} (limits: {LOOP_MAX_ITERATIONS} its, ratio {LOOP_MAX_RATIO}); control ratio spread {spread:.3} (limit {CONTROL_RATIO_SPREAD})",
            lines.join("; ")
        ),
    };

    let (f, r) = first.expect("at least one draw");
    let e = EnergySetup {
        op: &scn.op,
        coupling: &s.coupling,
        f: Some(&f),
        v: &r.v,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dirs = (0..INSENSITIVITY_DIRECTIONS)
        .map(|_| PerturbationSpec::random(s.grid(), 4, DEFAULT_LADDER.to_vec(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let rep = insensitivity_check(&e, &dirs)?;
    let max_fd = rep.checks().map(|c| c.fd.abs()).fold(0.0, f64::max);
    let max_adj = rep.checks().map(|c| c.adjoint.abs()).fold(0.0, f64::max);
    let max_disc = rep.checks().map(|c| c.discrepancy).fold(0.0, f64::max);
    let max_budget = rep.checks().map(|c| c.budget).fold(0.0, f64::max);
    let lin = rep.max_abs_linear_coefficient();
    let c10 = Outcome {
        pass: max_fd <= INSENSITIVITY_TOL
            && max_adj <= INSENSITIVITY_TOL
            && rep.all_agree()
            && lin <= INSENSITIVITY_TOL,
        detail: format!(
            "{} directions: max |FD| {max_fd:.3e}, max |adjoint| {max_adj:.3e} (tol {INSENSITIVITY_TOL:e}); \
             max |FD - adjoint| {max_disc:.3e} within budget (max budget {max_budget:.3e}): {}; \
             max |linear coefficient| {lin:.3e}; |h(0)| {:.3e}",
            dirs.len(),
            rep.all_agree(),
            rep.h0_norm
        ),
    };
    Ok((c9, c10))
}

fn c11() -> Result<Outcome> {
    let g = SpatialGrid::new(1.0, 64)?;
    let t = TimeGrid::new(1.0, 128)?;
    let op = QuasilinearOperator::new(&g, &t, &CoefficientSet::logistic())?;
    let f = generate(&SourceSpec::random(0.5, 3), &g, &t, Alignment::Forward, 11)?;
    let r = uniqueness_check(&op, &f, 0.1)?;
    outcome(
        r.max_difference <= UNIQUENESS_TOL,
        format!(
            "sup_t |psi - psi~| = {:.3e} (tol {UNIQUENESS_TOL:e}); Newton iterations {} vs {}",
            r.max_difference, r.iterations_previous, r.iterations_offset
        ),
    )
}

fn report(id: &str, name: &str, r: Result<Outcome>) -> bool {
    match r {
        Ok(o) => {
            println!(
                "{} {id} {name}: {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            o.pass
        }
        Err(e) => {
            println!("FAIL {id} {name}: error: {e}");
            false
        }
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut ok = true;
    ok &= report("C1", "discrete duality", c1());
    ok &= report("C2", "conservation and dissipation", c2());
    ok &= report("C3", "manufactured-solution convergence", c3());
    ok &= report("C4", "weighted least-squares optimality", c4());
    ok &= report("C5", "null reach", c5());
    ok &= report("C6", "weighted estimates", c6());
    ok &= report("C7", "empirical Carleman constants", c7());
    ok &= report("C8", "derivative of the nonlinear parts", c8());
    match c9_c10() {
        Ok((a, b)) => {
            ok &= report("C9", "outer-loop contraction", Ok(a));
            ok &= report("C10", "insensitivity", Ok(b));
        }
        Err(e) => {
            println!("FAIL C9 outer-loop contraction: error: {e}");
            println!("FAIL C10 insensitivity: error: {e}");
            ok = false;
        }
    }
    ok &= report("C11", "uniqueness", c11());
    println!(
        "acceptance: {} in {:.1} s",
        if ok {
            "all criteria passed"
        } else {
            "some criteria failed"
        },
        start.elapsed().as_secs_f64()
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
