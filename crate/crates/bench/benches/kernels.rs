use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dnetreg::baselines::dedgereg_fit;
use dnetreg::fit::{fista_gamma, StepSize};
use dnetreg::problem::Problem;
use dnetreg::spline::equispaced_grid;
use dnetreg::{cp_decompose, fit, Family, FitOptions, SplineBasis, Tensor4};
use dnetreg_bench::fixture;
use std::hint::black_box;

fn spline(c: &mut Criterion) {
    let basis = SplineBasis::new(8, 3).unwrap();
    let grid = equispaced_grid(100);
    c.bench_function("basis_matrix_T100_K8", |b| b.iter(|| basis.basis_matrix(black_box(&grid)).unwrap()));
}

fn objective(c: &mut Criterion) {
    let data = fixture(30, 30, 50);
    let basis = SplineBasis::new(8, 3).unwrap();
    let problem = Problem::new(&data, Family::BernoulliLogit, &basis).unwrap();
    let de = dedgereg_fit(&data, Family::BernoulliLogit, &basis).unwrap();
    let start = dnetreg::fit::params_from_dedgereg(&de, 2).unwrap();
    let base = problem.base_predictor(&start.baseline);
    let (slope, active) = problem.slope_predictor(&start.slopes);

    c.bench_function("evaluate_n30_N30_T50", |b| {
        b.iter(|| problem.evaluate(black_box(&base), &slope, &active, true))
    });
    let ev = problem.evaluate(&base, &slope, &active, false);
    c.bench_function("gamma_gradient_n30_N30_T50", |b| b.iter(|| problem.gamma_gradient(black_box(&ev))));
    let zero = Tensor4::zeros(30, 8, 1);
    c.bench_function("fista_n30_N30_T50", |b| {
        b.iter(|| fista_gamma(&problem, &base, black_box(&zero), 0.3, StepSize::Auto, 200, 1e-8))
    });
    let b0 = start.baseline_tensor();
    c.bench_function("cp_decompose_n30_K8_R2", |b| b.iter(|| cp_decompose(black_box(&b0), 2, 500, 1e-10).unwrap()));
}

fn full_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for n in [15, 30] {
        let data = fixture(n, 30, 50);
        let opts = FitOptions {
            rank: 2,
            lambda: 0.3,
            ..FitOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(n), &data, |b, d| {
            b.iter(|| fit(d, Family::BernoulliLogit, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, spline, objective, full_fit);
criterion_main!(benches);
