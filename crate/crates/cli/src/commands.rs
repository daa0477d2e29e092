//! The `synthesize`, `diagnose` and `sweep` commands.

use std::time::Instant;

use insens_core::diagnostics::{
    carleman_check, conservation_check, convergence_check, duality_check, estimates_check,
    gradient_check, null_reach_check, uniqueness_check,
};
use insens_core::ficontrol::FiSolver;
use insens_core::insense::{
    insensitivity_check, synthesize, EnergySetup, InsensitivityReport, LoopStatus,
    PerturbationSpec, SynthesisReport,
};
use insens_core::pdecore::coefficients::CoefficientFn;
use insens_core::pdecore::quasilinear::QuasilinearOperator;
use insens_core::scenario::Scenario;
use insens_core::sources::{generate, random_profile, SourceFamily, SourceSpec};
use insens_core::{Alignment, SpaceTimeField, SpatialGrid, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::{category_label, CliError};
use crate::output::{envelope, extract_timings, num, opt_num, to_value, OutDir, Table};

/// Bound on `|∂𝒥|` and on the fitted linear coefficient of the ladder.
pub const INSENSITIVITY_TOL: f64 = 1e-4;
/// Bound on the relative mismatch between the weighted-solve state and the
/// state of the quasilinear cascade driven by the final control.
pub const STATE_MISMATCH_TOL: f64 = 1e-6;
/// Duality defect bound, relative to `‖Y‖‖W‖`.
pub const DUALITY_TOL: f64 = 1e-13;
/// Mass drift bound per step.
pub const MASS_DRIFT_TOL: f64 = 1e-12;
/// Relative slack allowed on a nonincreasing norm.
pub const DISSIPATION_SLACK: f64 = 1e-14;
/// Smallest accepted observed spatial order.
pub const SPATIAL_ORDER_MIN: f64 = 1.9;
/// Smallest accepted observed temporal order.
pub const TEMPORAL_ORDER_MIN: f64 = 0.9;
/// Bound on the distance between two Newton solutions.
pub const UNIQUENESS_TOL: f64 = 1e-10;
/// Bound on the relative error of the analytic coefficient derivatives.
pub const GRADIENT_TOL: f64 = 1e-6;
/// Bound on `|Δ log C|` under one refinement by a factor two.
pub const REFINEMENT_LOG_CHANGE: f64 = std::f64::consts::LN_2;
/// Required reduction of `|h(0)|` per refinement of the time grid.
pub const NULL_REACH_REDUCTION: f64 = 3.0;
/// Amplitude of the fallback source when the configured one is zero.
pub const FALLBACK_AMPLITUDE: f64 = 1e-3;
/// Cosine modes of the fallback source.
pub const FALLBACK_MODES: usize = 3;
/// Random initial-datum modes of the conservation check.
pub const CONSERVATION_MODES: usize = 6;
/// Amplitude of the state perturbations in the derivative check.
pub const GRADIENT_AMPLITUDE: f64 = 0.3;

/// Offsets that decorrelate the random streams drawn from one seed.
const STREAM_SOURCE: u64 = 0;
const STREAM_DIRECTIONS: u64 = 0x5eed_0001;

/// One recorded pass/fail check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    /// Short name.
    pub name: String,
    /// Whether the check passed.
    pub passed: bool,
    /// Measured value.
    pub value: f64,
    /// Threshold the value is compared against.
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }

    fn flag(name: &str, passed: bool) -> Self {
        Self {
            name: name.into(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }
}

/// What a command reports back to `main`.
#[derive(Debug)]
pub struct Outcome {
    /// Process exit code.
    pub exit_code: u8,
    /// Lines printed on standard output.
    pub lines: Vec<String>,
}

fn stamp(cfg: &RunConfig, command: &str) -> Map<String, Value> {
    envelope(command, &cfg.hash(), cfg.seed)
}

/// Write a JSON document after moving its timings into a sibling file.
fn write_with_timings(
    out: &OutDir,
    name: &str,
    timings_name: &str,
    mut doc: Map<String, Value>,
    mut timings: Map<String, Value>,
) -> Result<(), CliError> {
    let mut value = Value::Object(std::mem::take(&mut doc));
    extract_timings(&mut value, "", &mut timings);
    out.write_json(name, &value)?;
    let mut t = Map::new();
    if let Value::Object(m) = &value {
        for key in ["schema_version", "command", "config_hash", "seed"] {
            if let Some(v) = m.get(key) {
                t.insert(key.into(), v.clone());
            }
        }
    }
    t.insert("seconds".into(), Value::Object(timings));
    out.write_json(timings_name, &Value::Object(t))?;
    Ok(())
}

fn forward_source(
    spec: &SourceSpec,
    grid: &SpatialGrid,
    time: &TimeGrid,
    seed: u64,
) -> Result<SpaceTimeField, CliError> {
    Ok(generate(
        spec,
        grid,
        time,
        Alignment::Forward,
        seed.wrapping_add(STREAM_SOURCE),
    )?)
}

/// Core of one synthesis run, shared by `synthesize` and `sweep`.
struct Synthesis {
    scenario: Scenario,
    f: SpaceTimeField,
    report: SynthesisReport,
    seconds: f64,
}

fn run_synthesis(cfg: &RunConfig) -> Result<Synthesis, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let scenario = Scenario::build(&cfg.scenario)?;
    let s = &scenario.setup;
    let f = forward_source(&cfg.source, s.grid(), s.time(), cfg.seed)?;
    let g = SpaceTimeField::zeros(s.grid(), s.time(), Alignment::Backward);
    let solver = FiSolver::new(s)?;
    let report = synthesize(&solver, &scenario.op, &f, &g, &cfg.scenario.outer)?;
    Ok(Synthesis {
        scenario,
        f,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_insensitivity(cfg: &RunConfig, syn: &Synthesis) -> Result<InsensitivityReport, CliError> {
    let s = &syn.scenario.setup;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(STREAM_DIRECTIONS));
    let dirs = (0..cfg.insensitivity.directions)
        .map(|_| {
            PerturbationSpec::random(
                s.grid(),
                cfg.insensitivity.modes,
                cfg.insensitivity.ladder.clone(),
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let setup = EnergySetup {
        op: &syn.scenario.op,
        coupling: &s.coupling,
        f: Some(&syn.f),
        v: &syn.report.v,
    };
    Ok(insensitivity_check(&setup, &dirs)?)
}

fn history_table(r: &SynthesisReport) -> Table {
    let mut t = Table::new(&[
        "iteration",
        "increment",
        "log_increment",
        "ratio",
        "h0_norm",
        "fi_iterations",
        "fi_residual",
    ]);
    for it in &r.history {
        t.push(vec![
            it.iteration.to_string(),
            num(it.increment),
            num(it.log_increment),
            opt_num(it.ratio),
            opt_num(it.h0_norm),
            it.fi_iterations.to_string(),
            num(it.fi_residual),
        ]);
    }
    t
}

fn ladders_table(rep: &InsensitivityReport) -> Table {
    let mut t = Table::new(&["direction", "part", "tau", "j_plus", "j_minus", "j0"]);
    for d in &rep.directions {
        for c in [&d.bulk, &d.surface] {
            let part = serde_json::to_value(c.part)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            for &(tau, jp, jm) in &c.ladder {
                t.push(vec![
                    d.index.to_string(),
                    part.clone(),
                    num(tau),
                    num(jp),
                    num(jm),
                    num(c.j0),
                ]);
            }
        }
    }
    t
}

/// Control samples on the cell nodes: one row per (time cell, grid node),
/// followed by the surface values at the two endpoints.
fn control_table(v: &SpaceTimeField, grid: &SpatialGrid, time: &TimeGrid) -> Table {
    let mut t = Table::new(&["t", "x", "component", "v"]);
    let [left, right] = grid.boundary_nodes();
    for c in 1..=time.steps() {
        let j = v.alignment.slice_of(c);
        let slice = &v.slices[j];
        let tj = num(time.t(j));
        for (i, &val) in slice.bulk.iter().enumerate() {
            t.push(vec![tj.clone(), num(grid.x(i)), "bulk".into(), num(val)]);
        }
        for (node, val) in [(left, slice.surface[0]), (right, slice.surface[1])] {
            t.push(vec![
                tj.clone(),
                num(grid.x(node)),
                "surface".into(),
                num(val),
            ]);
        }
    }
    t
}

fn weights_table(s: &Scenario) -> Table {
    let tables = &s.setup.tables;
    let mut t = Table::new(&[
        "t", "ell", "gamma", "log_mu", "log_mu0", "log_mu1", "log_mu2", "log_mu3", "log_mu4",
        "log_mu5", "clamped",
    ]);
    for (row, &clamped) in tables.profile_rows().iter().zip(&tables.clamped) {
        let mut cells: Vec<String> = row.iter().map(|&x| num(x)).collect();
        cells.push(clamped.to_string());
        t.push(cells);
    }
    t
}

fn weights_info(s: &Scenario) -> Result<Value, CliError> {
    let tables = &s.setup.tables;
    let last_clamped = tables
        .times
        .iter()
        .zip(&tables.clamped)
        .filter(|(_, &c)| c)
        .map(|(&t, _)| t)
        .fold(None, |acc: Option<f64>, t| {
            Some(acc.map_or(t, |a| a.max(t)))
        });
    let mut m = Map::new();
    m.insert("params".into(), to_value(&tables.params)?);
    m.insert("cells".into(), Value::from(tables.clamped.len()));
    m.insert(
        "resolved_cells".into(),
        Value::from(tables.resolved_cells()),
    );
    m.insert("last_clamped_time".into(), to_value(&last_clamped)?);
    m.insert("log_shift".into(), Value::from(tables.log_shift));
    Ok(Value::Object(m))
}

/// `insens synthesize`: build the control, verify it, check insensitivity.
pub fn cmd_synthesize(cfg: &RunConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let syn = run_synthesis(cfg)?;
    let ins_start = Instant::now();
    let ins = run_insensitivity(cfg, &syn)?;
    let ins_seconds = ins_start.elapsed().as_secs_f64();
    let r = &syn.report;

    let max_fd = ins.checks().map(|c| c.fd.abs()).fold(0.0, f64::max);
    let max_adj = ins.checks().map(|c| c.adjoint.abs()).fold(0.0, f64::max);
    let checks = vec![
        Check::flag("converged", r.status == LoopStatus::Converged),
        Check::at_most("max_abs_fd_derivative", max_fd, INSENSITIVITY_TOL),
        Check::at_most("max_abs_adjoint_derivative", max_adj, INSENSITIVITY_TOL),
        Check::flag("fd_adjoint_agree", ins.all_agree()),
        Check::at_most(
            "max_abs_linear_coefficient",
            ins.max_abs_linear_coefficient(),
            INSENSITIVITY_TOL,
        ),
        Check::at_most("state_mismatch", r.state_mismatch, STATE_MISMATCH_TOL),
    ];

    let mut doc = stamp(cfg, "synthesize");
    doc.insert("config".into(), to_value(cfg)?);
    doc.insert("synthesis".into(), to_value(r)?);
    doc.insert("insensitivity".into(), to_value(&ins)?);
    doc.insert("weights".into(), weights_info(&syn.scenario)?);
    doc.insert("checks".into(), to_value(&checks)?);

    let grid = syn.scenario.grid();
    let time = syn.scenario.time();
    out.write_csv("history.csv", &history_table(r))?;
    out.write_csv("ladders.csv", &ladders_table(&ins))?;
    out.write_csv("control.csv", &control_table(&r.v, grid, time))?;
    out.write_csv("weights.csv", &weights_table(&syn.scenario))?;

    let mut timings = Map::new();
    timings.insert("synthesis".into(), Value::from(syn.seconds));
    timings.insert("insensitivity".into(), Value::from(ins_seconds));
    timings.insert("total".into(), Value::from(start.elapsed().as_secs_f64()));
    write_with_timings(out, "summary.json", "timings.json", doc, timings)?;

    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    let mut lines = vec![
        format!(
            "status {:?} after {} outer iterations (max increment ratio {:.3e})",
            r.status,
            r.iterations,
            r.max_increment_ratio()
        ),
        format!(
            "|v|_L2 {:.6e}, |h(0)| {:.3e}, state mismatch {:.3e}",
            r.v_l2, r.h0_norm, r.state_mismatch
        ),
        format!(
            "insensitivity: max |FD| {max_fd:.3e}, max |adjoint| {max_adj:.3e}, agree {}",
            ins.all_agree()
        ),
    ];
    lines.push(if failed.is_empty() {
        "all checks passed".into()
    } else {
        format!("failed checks: {}", failed.join(", "))
    });
    // A loop that stops at the iteration cap means the data are outside the
    // small-data regime.
    let exit_code = if r.status == LoopStatus::Converged {
        0
    } else {
        3
    };
    Ok(Outcome { exit_code, lines })
}

/// Diagnostics available through `insens diagnose`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Diagnostic {
    /// Discrete duality of the forward and adjoint operators.
    Duality,
    /// Mass conservation and dissipation without reactions.
    Conservation,
    /// Observed orders against a manufactured solution.
    Convergence,
    /// Newton solutions from two starting points.
    Uniqueness,
    /// Analytic coefficient derivatives against central differences.
    Gradient,
    /// Refinement stability of the estimate constants.
    Estimates,
    /// Refinement stability of the Carleman constants.
    Carleman,
    /// Decay of the adjoint state at `t = 0` under time refinement.
    NullReach,
}

impl Diagnostic {
    /// Name used in file names and JSON.
    pub fn name(self) -> &'static str {
        match self {
            Diagnostic::Duality => "duality",
            Diagnostic::Conservation => "conservation",
            Diagnostic::Convergence => "convergence",
            Diagnostic::Uniqueness => "uniqueness",
            Diagnostic::Gradient => "gradient",
            Diagnostic::Estimates => "estimates",
            Diagnostic::Carleman => "carleman",
            Diagnostic::NullReach => "null-reach",
        }
    }
}

/// The configured source, or a small random one when it is zero.
fn nonzero_source(cfg: &RunConfig) -> SourceSpec {
    if cfg.source.family == SourceFamily::Zero || cfg.source.amplitude == 0.0 {
        SourceSpec::random(FALLBACK_AMPLITUDE, FALLBACK_MODES)
    } else {
        cfg.source.clone()
    }
}

fn grids(cfg: &RunConfig) -> Result<(SpatialGrid, TimeGrid), CliError> {
    let g = SpatialGrid::new(cfg.scenario.grid.length, cfg.scenario.grid.cells)?;
    let t = TimeGrid::new(cfg.scenario.time.horizon, cfg.scenario.time.steps)?;
    Ok((g, t))
}

/// `insens diagnose <which>`.
pub fn cmd_diagnose(cfg: &RunConfig, which: Diagnostic, out: &OutDir) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.seed;
    let d = &cfg.diagnostics;
    let (report, checks, summary): (Value, Vec<Check>, String) = match which {
        Diagnostic::Duality => {
            let scn = Scenario::build(&cfg.scenario)?;
            let r = duality_check(&scn.setup.ops, d.duality_pairs, seed)?;
            let line = format!(
                "max normalized duality defect {:.3e} over {} pairs",
                r.max_defect, r.pairs
            );
            (
                to_value(&r)?,
                vec![Check::at_most("max_defect", r.max_defect, DUALITY_TOL)],
                line,
            )
        }
        Diagnostic::Conservation => {
            let (g, t) = grids(cfg)?;
            let mut coeffs = cfg.scenario.coefficients.to_set();
            coeffs.a = CoefficientFn::constant(0.0);
            coeffs.b = CoefficientFn::constant(0.0);
            let op = QuasilinearOperator::new(&g, &t, &coeffs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let datum = random_profile(&g, CONSERVATION_MODES, &mut rng);
            let r = conservation_check(&op, &datum)?;
            let checks = vec![
                Check::at_most(
                    "max_mass_drift_per_step",
                    r.max_mass_drift_per_step,
                    MASS_DRIFT_TOL,
                ),
                Check::at_most(
                    "max_relative_norm_increase",
                    r.max_relative_norm_increase,
                    DISSIPATION_SLACK,
                ),
            ];
            let line = format!(
                "mass drift per step {:.3e}, largest relative norm increase {:.3e}",
                r.max_mass_drift_per_step, r.max_relative_norm_increase
            );
            (to_value(&r)?, checks, line)
        }
        Diagnostic::Convergence => {
            let r = convergence_check(&d.convergence)?;
            let checks = vec![
                Check::at_least(
                    "min_spatial_order",
                    r.min_spatial_order(),
                    SPATIAL_ORDER_MIN,
                ),
                Check::at_least(
                    "min_temporal_order",
                    r.min_temporal_order(),
                    TEMPORAL_ORDER_MIN,
                ),
            ];
            let line = format!(
                "spatial orders {:?}, temporal orders {:?}",
                r.spatial_orders, r.temporal_orders
            );
            (to_value(&r)?, checks, line)
        }
        Diagnostic::Uniqueness => {
            let scn = Scenario::build(&cfg.scenario)?;
            let f = forward_source(&nonzero_source(cfg), scn.grid(), scn.time(), seed)?;
            let r = uniqueness_check(&scn.op, &f, d.uniqueness_offset)?;
            let line = format!("sup_t |psi - psi~| = {:.3e}", r.max_difference);
            (
                to_value(&r)?,
                vec![Check::at_most(
                    "max_difference",
                    r.max_difference,
                    UNIQUENESS_TOL,
                )],
                line,
            )
        }
        Diagnostic::Gradient => {
            let scn = Scenario::build(&cfg.scenario)?;
            let r = gradient_check(
                "configured",
                &scn.op,
                GRADIENT_AMPLITUDE,
                d.gradient_step,
                seed,
            )?;
            let line = format!(
                "relative derivative error: psi rows {:.3e}, h rows {:.3e}",
                r.rel_error_psi_rows, r.rel_error_h_rows
            );
            (
                to_value(&r)?,
                vec![Check::at_most(
                    "max_rel_error",
                    r.max_rel_error(),
                    GRADIENT_TOL,
                )],
                line,
            )
        }
        Diagnostic::Estimates => {
            let r = estimates_check(&cfg.scenario, &nonzero_source(cfg), d.estimate_draws, seed)?;
            let checks = vec![
                Check::flag("all_finite", r.all_finite),
                Check::at_most("max_log_change", r.max_log_change, REFINEMENT_LOG_CHANGE),
            ];
            let line = format!(
                "{} draws, M {} -> {}: max |d log ratio| {:.3}",
                r.draws.len(),
                r.coarse_steps,
                r.fine_steps,
                r.max_log_change
            );
            (to_value(&r)?, checks, line)
        }
        Diagnostic::Carleman => {
            let r = carleman_check(&cfg.scenario, d.carleman_samples, seed)?;
            let checks = vec![
                Check::flag("all_finite", r.all_finite()),
                Check::at_most("max_log_change", r.max_log_change(), REFINEMENT_LOG_CHANGE),
            ];
            let line = format!(
                "{} samples, {:?} -> {:?}: max |d log C| {:.3}",
                r.samples,
                r.coarse,
                r.fine,
                r.max_log_change()
            );
            (to_value(&r)?, checks, line)
        }
        Diagnostic::NullReach => {
            let r = null_reach_check(
                &cfg.scenario,
                &nonzero_source(cfg),
                &d.null_reach_steps,
                seed,
            )?;
            let worst = r.recovered_reductions.iter().copied().fold(0.0, f64::max);
            let checks = vec![Check::at_most(
                "max_recovered_reduction",
                worst,
                1.0 / NULL_REACH_REDUCTION,
            )];
            let line = format!(
                "|h(0)| ratios per refinement: recovered {:?}, re-solved {:?}",
                r.recovered_reductions, r.resolved_reductions
            );
            (to_value(&r)?, checks, line)
        }
    };

    let name = which.name();
    let mut doc = stamp(cfg, "diagnose");
    doc.insert("diagnostic".into(), Value::from(name));
    doc.insert("config".into(), to_value(cfg)?);
    doc.insert("report".into(), report);
    doc.insert("checks".into(), to_value(&checks)?);
    let mut timings = Map::new();
    timings.insert("total".into(), Value::from(start.elapsed().as_secs_f64()));
    write_with_timings(
        out,
        &format!("diagnose-{name}.json"),
        &format!("diagnose-{name}.timings.json"),
        doc,
        timings,
    )?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    let verdict = if failed.is_empty() {
        "all checks passed".to_string()
    } else {
        format!("failed checks: {}", failed.join(", "))
    };
    Ok(Outcome {
        exit_code: 0,
        lines: vec![format!("{name}: {summary}"), verdict],
    })
}

/// Parameters that `insens sweep` can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Source amplitude.
    Amplitude,
    /// Number of spatial cells.
    #[value(name = "N")]
    Cells,
    /// Number of time steps.
    #[value(name = "M")]
    Steps,
    /// Weight parameter `λ`.
    Lambda,
    /// Weight parameter `C_s`.
    #[value(name = "C_s")]
    CS,
    /// Surface observation weight `θ_Γ`.
    ThetaGamma,
}

impl SweepParam {
    /// Name used in the outputs.
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Amplitude => "amplitude",
            SweepParam::Cells => "N",
            SweepParam::Steps => "M",
            SweepParam::Lambda => "lambda",
            SweepParam::CS => "C_s",
            SweepParam::ThetaGamma => "theta_gamma",
        }
    }

    /// A copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig, CliError> {
        let mut c = cfg.clone();
        let count = || -> Result<usize, CliError> {
            if value.is_finite() && value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Invalid(format!(
                    "{} must be a positive integer, got {value}",
                    self.name()
                )))
            }
        };
        match self {
            SweepParam::Amplitude => {
                if c.source.family == SourceFamily::Zero {
                    return Err(CliError::Invalid(
                        "an amplitude sweep needs a nonzero source family".into(),
                    ));
                }
                c.source.amplitude = value;
            }
            SweepParam::Cells => c.scenario.grid.cells = count()?,
            SweepParam::Steps => c.scenario.time.steps = count()?,
            SweepParam::Lambda => c.scenario.weights.lambda = value,
            SweepParam::CS => c.scenario.weights.c_s = value,
            SweepParam::ThetaGamma => c.scenario.functional.theta_gamma = value,
        }
        Ok(c)
    }
}

/// One sweep row.
#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    value: f64,
    status: String,
    exit_code: u8,
    iterations: Option<usize>,
    max_increment_ratio: Option<f64>,
    h0_norm: Option<f64>,
    state_mismatch: Option<f64>,
    v_l2: Option<f64>,
    log_y_norm: Option<f64>,
    log_control_ratio: Option<f64>,
    error: Option<String>,
    seconds: f64,
}

fn sweep_row(cfg: &RunConfig, param: SweepParam, value: f64) -> SweepRow {
    let start = Instant::now();
    let result = param.apply(cfg, value).and_then(|c| run_synthesis(&c));
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(syn) => {
            let r = &syn.report;
            let converged = r.status == LoopStatus::Converged;
            SweepRow {
                value,
                status: if converged {
                    "converged"
                } else {
                    "max_iterations"
                }
                .into(),
                exit_code: if converged { 0 } else { 3 },
                iterations: Some(r.iterations),
                max_increment_ratio: Some(r.max_increment_ratio()),
                h0_norm: Some(r.h0_norm),
                state_mismatch: Some(r.state_mismatch),
                v_l2: Some(r.v_l2),
                log_y_norm: Some(r.log_y_norm),
                log_control_ratio: Some(r.log_control_ratio),
                error: None,
                seconds,
            }
        }
        Err(e) => SweepRow {
            value,
            status: category_label(e.category()).into(),
            exit_code: e.exit_code(),
            iterations: None,
            max_increment_ratio: None,
            h0_norm: None,
            state_mismatch: None,
            v_l2: None,
            log_y_norm: None,
            log_control_ratio: None,
            error: Some(format!("[{}] {e}", e.contract())),
            seconds,
        },
    }
}

/// `insens sweep`: one synthesis per parameter value. Failures are recorded
/// per row and do not stop the sweep.
pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    out: &OutDir,
) -> Result<Outcome, CliError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(CliError::Invalid("sweep needs at least one value".into()));
    }
    let start = Instant::now();
    let rows: Vec<SweepRow> = values.iter().map(|&v| sweep_row(cfg, param, v)).collect();

    let mut table = Table::new(&[
        "parameter",
        "value",
        "status",
        "exit_code",
        "iterations",
        "max_increment_ratio",
        "h0_norm",
        "state_mismatch",
        "v_l2",
        "log_y_norm",
        "log_control_ratio",
        "error",
    ]);
    for r in &rows {
        table.push(vec![
            param.name().into(),
            num(r.value),
            r.status.clone(),
            r.exit_code.to_string(),
            r.iterations.map(|i| i.to_string()).unwrap_or_default(),
            opt_num(r.max_increment_ratio),
            opt_num(r.h0_norm),
            opt_num(r.state_mismatch),
            opt_num(r.v_l2),
            opt_num(r.log_y_norm),
            opt_num(r.log_control_ratio),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    out.write_csv("sweep.csv", &table)?;

    let mut doc = stamp(cfg, "sweep");
    doc.insert("parameter".into(), Value::from(param.name()));
    doc.insert("config".into(), to_value(cfg)?);
    doc.insert("rows".into(), to_value(&rows)?);
    let mut timings = Map::new();
    timings.insert("total".into(), Value::from(start.elapsed().as_secs_f64()));
    write_with_timings(out, "sweep.json", "sweep.timings.json", doc, timings)?;

    let lines = rows
        .iter()
        .map(|r| match &r.error {
            None => format!(
                "{} = {}: {} in {} iterations, |h(0)| {:.3e}",
                param.name(),
                r.value,
                r.status,
                r.iterations.unwrap_or(0),
                r.h0_norm.unwrap_or(f64::NAN)
            ),
            Some(e) => format!("{} = {}: {} error: {e}", param.name(), r.value, r.status),
        })
        .collect();
    Ok(Outcome {
        exit_code: 0,
        lines,
    })
}
