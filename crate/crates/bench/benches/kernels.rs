//! Timings of the main kernels on the reference scenario: one application of
//! the space-time operator and its adjoint, one weighted least-squares solve,
//! one quasilinear forward solve and one full synthesis.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use insens_core::ficontrol::{FIProblem, FiSolver};
use insens_core::insense::synthesize;
use insens_core::pdecore::{solve_quasilinear, InitialGuess, OperatorVariant};
use insens_core::scenario::{Scenario, ScenarioSpec};
use insens_core::sources::{generate, SourceSpec};
use insens_core::{Alignment, BulkSurfaceField, SpaceTimeField};

const AMPLITUDE: f64 = 1e-3;
const MODES: usize = 3;
const SIZES: [(usize, usize); 2] = [(32, 64), (64, 128)];

fn scenario(cells: usize, steps: usize) -> Scenario {
    Scenario::build(&ScenarioSpec::reference(cells, steps)).expect("reference scenario builds")
}

fn source(s: &Scenario, alignment: Alignment, seed: u64) -> SpaceTimeField {
    generate(
        &SourceSpec::random(AMPLITUDE, MODES),
        s.grid(),
        s.time(),
        alignment,
        seed,
    )
    .expect("source generates")
}

/// Smooth field whose surface values equal its boundary trace, as required
/// of operator arguments.
fn trace_field(s: &Scenario, alignment: Alignment) -> SpaceTimeField {
    let u = |x: f64, t: f64| (3.0 * x + 1.0).sin() * (2.0 * t).cos();
    SpaceTimeField::from_cell_fn(s.grid(), s.time(), alignment, u, u)
}

fn apply_l(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_l");
    for (n, m) in SIZES {
        let s = scenario(n, m);
        let y = trace_field(&s, Alignment::Forward);
        let w = trace_field(&s, Alignment::Backward);
        let ops = &s.setup.ops;
        group.bench_with_input(
            BenchmarkId::new("primal", format!("{n}x{m}")),
            &y,
            |b, y| b.iter(|| ops.apply_l(black_box(y), OperatorVariant::Primal).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("adjoint", format!("{n}x{m}")),
            &w,
            |b, w| b.iter(|| ops.apply_l(black_box(w), OperatorVariant::Adjoint).unwrap()),
        );
    }
    group.finish();
}

fn fi_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("fi_solve");
    group.sample_size(10);
    for (n, m) in SIZES {
        let s = scenario(n, m);
        let f = source(&s, Alignment::Forward, 3);
        let g = source(&s, Alignment::Backward, 4);
        let problem = FIProblem::new(&s.setup, f, g).unwrap();
        let solver = FiSolver::new(&s.setup).unwrap();
        group.bench_function(BenchmarkId::new("factored", format!("{n}x{m}")), |b| {
            b.iter(|| solver.solve(black_box(&problem)).unwrap())
        });
    }
    group.finish();
}

fn quasilinear_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("quasilinear_solve");
    for (n, m) in SIZES {
        let s = scenario(n, m);
        let f = generate(
            &SourceSpec::random(0.5, MODES),
            s.grid(),
            s.time(),
            Alignment::Forward,
            5,
        )
        .unwrap();
        let psi0 = BulkSurfaceField::zeros(s.grid());
        group.bench_function(BenchmarkId::new("newton", format!("{n}x{m}")), |b| {
            b.iter(|| {
                solve_quasilinear(
                    &s.op,
                    Some(black_box(&f)),
                    &psi0,
                    None,
                    InitialGuess::Previous,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group("synthesize");
    group.sample_size(10);
    let (n, m) = SIZES[0];
    let s = scenario(n, m);
    let f = source(&s, Alignment::Forward, 6);
    let g = SpaceTimeField::zeros(s.grid(), s.time(), Alignment::Backward);
    let solver = FiSolver::new(&s.setup).unwrap();
    group.bench_function(BenchmarkId::new("outer_loop", format!("{n}x{m}")), |b| {
        b.iter(|| synthesize(&solver, &s.op, black_box(&f), &g, &s.spec.outer).unwrap())
    });
    group.finish();
}

criterion_group!(kernels, apply_l, fi_solve, quasilinear_solve, synthesis);
criterion_main!(kernels);
