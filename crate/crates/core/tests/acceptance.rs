//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stdout (uncaptured) before asserting.

use std::io::Write;
use std::sync::OnceLock;

use dnetreg::fit::{group_shrink, LambdaSpec};
use dnetreg::glm::{grad_gamma, grad_u1r, grad_u3r};
use dnetreg::network::{networks_from_signals, observed_split_options, permutation_test, PermutationOptions, SignalMatrix};
use dnetreg::simulation::{
    generate, generate_two_groups, run_study, BenchConfig, Metrics, Method, SimConfig, StudyOptions, StudyReport,
};
use dnetreg::{cp_decompose, fit, tune, CpFactors, DynamicNetworkDataset, Family, FitOptions, ModelParams, SplineBasis, Tensor3, Tensor4};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion}: {verdict} ({detail})");
    let _ = out.flush();
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Bernoulli negative log-likelihood written out cell by cell: every
/// subject, time point and unordered pair, with `Γ` entering through its
/// symmetric part.
fn nll_oracle(params: &ModelParams, data: &DynamicNetworkDataset, phi: &DMatrix<f64>) -> f64 {
    let f = &params.baseline;
    let (n, k, p) = (data.n_nodes(), phi.ncols(), data.n_covariates());
    let mut total = 0.0;
    for i in 0..data.n_subjects() {
        for h in 0..data.n_times() {
            for j in 0..n {
                for jp in (j + 1)..n {
                    let mut eta = 0.0;
                    for kk in 0..k {
                        let mut coef: f64 = (0..f.rank()).map(|r| f.w[r] * f.u1[(j, r)] * f.u1[(jp, r)] * f.u3[(kk, r)]).sum();
                        for l in 0..p {
                            let g = 0.5 * (params.slopes.get(j, jp, kk, l) + params.slopes.get(jp, j, kk, l));
                            coef += data.covariates()[(i, l)] * g;
                        }
                        eta += phi[(h, kk)] * coef;
                    }
                    let a = data.edge(i, h, j, jp);
                    total += a * eta - (1.0 + eta.exp()).ln();
                }
            }
        }
    }
    -total / data.n_subjects() as f64
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let (n, k, p, rank, subjects, times) = (6, 4, 2, 2, 5, 10);
    let cfg = SimConfig {
        n,
        subjects,
        times,
        basis_dim: k,
        rank,
        s0: 0.2,
        covariates: p,
        seed: 101,
        ..SimConfig::default()
    };
    let (data, _) = generate(&cfg).unwrap();
    let basis = SplineBasis::new(k, 3).unwrap();
    let phi = basis.basis_matrix(data.time_grid()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let w = vec![1.3, 0.7];
    let u1 = DMatrix::from_fn(n, rank, |_, _| normal(&mut rng) * 0.5);
    let u3 = DMatrix::from_fn(k, rank, |_, _| normal(&mut rng) * 0.5);
    let mut slopes = Tensor4::zeros(n, k, p);
    for j in 0..n {
        for jp in (j + 1)..n {
            for kk in 0..k {
                for l in 0..p {
                    let v = normal(&mut rng) * 0.3;
                    slopes.set(j, jp, kk, l, v);
                    slopes.set(jp, j, kk, l, v);
                }
            }
        }
    }
    let params = ModelParams {
        baseline: CpFactors { w, u1, u3 },
        slopes,
    };
    let f = |pp: &ModelParams| nll_oracle(pp, &data, &phi);
    // Five-point central stencil: truncation O(h⁴) keeps rounding noise small.
    let step = 1e-3;
    let stencil = |eval: &dyn Fn(f64) -> f64| {
        (-eval(2.0 * step) + 8.0 * eval(step) - 8.0 * eval(-step) + eval(-2.0 * step)) / (12.0 * step)
    };
    let mut worst = 0.0f64;
    let mut rel = |analytic: f64, numeric: f64| {
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(e);
    };
    for r in 0..rank {
        let g1 = grad_u1r(&params, &data, Family::BernoulliLogit, &basis, r).unwrap();
        let g3 = grad_u3r(&params, &data, Family::BernoulliLogit, &basis, r).unwrap();
        for a in 0..n {
            let numeric = stencil(&|d| {
                let mut q = params.clone();
                q.baseline.u1[(a, r)] += d;
                f(&q)
            });
            rel(g1[a], numeric);
        }
        for a in 0..k {
            let numeric = stencil(&|d| {
                let mut q = params.clone();
                q.baseline.u3[(a, r)] += d;
                f(&q)
            });
            rel(g3[a], numeric);
        }
    }
    let gg = grad_gamma(&params, &data, Family::BernoulliLogit, &basis).unwrap();
    for j in 0..n {
        for jp in 0..n {
            if j == jp {
                continue;
            }
            for kk in 0..k {
                for l in 0..p {
                    let v = params.slopes.get(j, jp, kk, l);
                    let numeric = stencil(&|d| {
                        let mut q = params.clone();
                        q.slopes.set(j, jp, kk, l, v + d);
                        f(&q)
                    });
                    rel(gg.get(j, jp, kk, l), numeric);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 10.0;
    report(1, pass, &format!("max relative error {worst:.2e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn criterion_02_objective_trace_never_increases() {
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..5 {
        let cfg = SimConfig {
            n: 30,
            subjects: 30,
            times: 50,
            seed: 300 + seed,
            ..SimConfig::default()
        };
        let (data, _) = generate(&cfg).unwrap();
        let opts = FitOptions {
            rank: 2,
            lambda: 0.3,
            ..FitOptions::default()
        };
        let result = fit(&data, Family::BernoulliLogit, &opts).unwrap();
        assert!(result.trace.len() >= 2);
        for w in result.trace.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    let pass = worst_rise <= 1e-10;
    report(2, pass, &format!("largest step-to-step change {worst_rise:.3e} over 5 datasets"));
    assert!(pass);
}

#[test]
fn criterion_03_group_shrink_hand_cases() {
    let mut g = Tensor4::zeros(2, 2, 1);
    g.set_fiber(0, 1, 0, &[3.0, 4.0]);
    g.set_fiber(1, 0, 0, &[0.3, 0.4]);
    let s = group_shrink(&g, 1.0);
    let big = s.fiber(0, 1, 0).to_vec();
    let small = s.fiber(1, 0, 0).to_vec();
    let pass = big == vec![2.4, 3.2] && small == vec![0.0, 0.0];
    report(3, pass, &format!("(3,4) -> {big:?}, (0.3,0.4) -> {small:?}"));
    assert!(pass);
}

fn study_options() -> StudyOptions {
    StudyOptions {
        rank_grid: vec![2],
        ..StudyOptions::default()
    }
}

fn study_config(subjects: usize) -> SimConfig {
    SimConfig {
        n: 50,
        subjects,
        times: 100,
        basis_dim: 8,
        rank: 2,
        s0: 0.05,
        seed: 20240601,
        ..SimConfig::default()
    }
}

fn study_n50() -> &'static StudyReport {
    static STUDY: OnceLock<StudyReport> = OnceLock::new();
    STUDY.get_or_init(|| run_study(&study_config(50), 10, &Method::ALL, &study_options()).unwrap())
}

fn metrics(report: &StudyReport, method: Method) -> Vec<Metrics> {
    report
        .per_replicate(method)
        .into_iter()
        .map(|m| m.expect("every replicate fits"))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_04_simulation_study() {
    let study = study_n50();
    let dn = metrics(study, Method::DNetReg);
    let de = metrics(study, Method::DEdgeReg);
    let er = metrics(study, Method::EdgeReg);
    let tpr_all = dn.iter().all(|m| m.tpr == Some(1.0));
    let fpr_mean = mean(&dn.iter().map(|m| m.fpr.unwrap()).collect::<Vec<_>>());
    let ordered = (0..dn.len()).all(|r| dn[r].mu_error < de[r].mu_error && de[r].mu_error < er[r].mu_error);
    let mu: Vec<f64> = dn.iter().map(|m| m.mu_error).collect();
    let mu_mean = mean(&mu);
    let pass_a = tpr_all && fpr_mean <= 0.05;
    let pass_c = (1.5..=3.5).contains(&mu_mean);
    let pass = pass_a && ordered && pass_c;
    report(
        4,
        pass,
        &format!(
            "TPR=1 on all: {tpr_all}, mean FPR {fpr_mean:.4}, ordering: {ordered}, mean mu-error DNetReg {mu_mean:.3} / DEdgeReg {:.3} / EdgeReg {:.3}",
            mean(&de.iter().map(|m| m.mu_error).collect::<Vec<_>>()),
            mean(&er.iter().map(|m| m.mu_error).collect::<Vec<_>>())
        ),
    );
    assert!(pass_a, "selection accuracy");
    assert!(ordered, "per-replicate ordering");
    assert!(pass_c, "mean mu-error {mu_mean}");
}

#[test]
fn criterion_05_more_subjects_lower_error() {
    let n50: Vec<f64> = metrics(study_n50(), Method::DNetReg)[..5].iter().map(|m| m.mu_error).collect();
    let study100 = run_study(&study_config(100), 5, &[Method::DNetReg], &study_options()).unwrap();
    let n100: Vec<f64> = metrics(&study100, Method::DNetReg).iter().map(|m| m.mu_error).collect();
    let (a, b) = (mean(&n50), mean(&n100));
    let pass = b < a;
    report(5, pass, &format!("mean mu-error N=50 {a:.3}, N=100 {b:.3}"));
    assert!(pass);
}

#[test]
fn criterion_06_ebic_selects_true_rank() {
    let mut picks = Vec::new();
    for seed in 0..5 {
        let cfg = SimConfig {
            n: 30,
            subjects: 100,
            times: 50,
            rank: 2,
            seed: 600 + seed,
            ..SimConfig::default()
        };
        let (data, _) = generate(&cfg).unwrap();
        let lambdas = LambdaSpec::Relative {
            count: 6,
            min_ratio: 0.05,
        };
        let result = tune(&data, Family::BernoulliLogit, &[1, 2, 3], &lambdas, &FitOptions::default()).unwrap();
        picks.push(result.best_rank);
    }
    let hits = picks.iter().filter(|r| **r == 2).count();
    let pass = hits >= 4;
    report(6, pass, &format!("selected ranks {picks:?}"));
    assert!(pass);
}

/// Regions in five communities, each following its own latent series plus
/// independent noise of equal variance.
fn block_signal(n: usize, scans: usize, seed: u64) -> SignalMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = 5;
    let latent = DMatrix::from_fn(blocks, scans, |_, _| normal(&mut rng));
    let values = DMatrix::from_fn(n, scans, |j, s| 1.2 * latent[(j * blocks / n, s)] + normal(&mut rng));
    SignalMatrix::new(format!("subject{seed}"), values).unwrap()
}

#[test]
fn criterion_07_pipeline_shape() {
    let signals: Vec<SignalMatrix> = (0..3).map(|i| block_signal(68, 263, 700 + i)).collect();
    let x = DMatrix::from_fn(3, 1, |i, _| i as f64);
    let (data, construction) = networks_from_signals(&signals, x, 30, 5, 0.5).unwrap();
    let density = construction.mean_density;
    let pass = data.n_times() == 47 && construction.windows == 47 && density > 0.05 && density < 0.30;
    report(7, pass, &format!("{} windows, density {density:.4}", data.n_times()));
    assert!(pass);
}

#[test]
fn criterion_08_cp_round_trip() {
    let (n, k, rank) = (20, 8, 2);
    let mut worst = 0.0f64;
    let mut successes = 0;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + trial);
        let u1 = DMatrix::from_fn(n, rank, |_, _| normal(&mut rng));
        let u3 = DMatrix::from_fn(k, rank, |_, _| normal(&mut rng));
        let w: Vec<f64> = (0..rank).map(|_| rng.random_range(1.0..5.0)).collect();
        let mut t = Tensor3::zeros(n, n, k);
        for j in 0..n {
            for jp in 0..n {
                for kk in 0..k {
                    let v: f64 = (0..rank).map(|r| w[r] * u1[(j, r)] * u1[(jp, r)] * u3[(kk, r)]).sum();
                    t.set(j, jp, kk, v);
                }
            }
        }
        let d = cp_decompose(&t, rank, 2000, 1e-14).unwrap();
        let f = &d.factors;
        let (mut err, mut norm) = (0.0, 0.0);
        for j in 0..n {
            for jp in 0..n {
                for kk in 0..k {
                    let v: f64 = (0..rank).map(|r| f.w[r] * f.u1[(j, r)] * f.u1[(jp, r)] * f.u3[(kk, r)]).sum();
                    err += (v - t.get(j, jp, kk)).powi(2);
                    norm += t.get(j, jp, kk).powi(2);
                }
            }
        }
        let rel = (err / norm).sqrt();
        worst = worst.max(rel);
        if rel < 1e-6 {
            successes += 1;
        }
    }
    let pass = successes == 20;
    report(8, pass, &format!("{successes}/20 recovered, worst relative error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_09_permutation_planted_difference() {
    let cfg = SimConfig {
        n: 20,
        subjects: 50,
        times: 50,
        seed: 900,
        ..SimConfig::default()
    };
    let groups = generate_two_groups(&cfg, 5, 2.0).unwrap();
    let lambdas = LambdaSpec::Relative {
        count: 8,
        min_ratio: 0.05,
    };
    let fit_opts = observed_split_options(&groups.data, &groups.labels, &[2], &lambdas, &FitOptions::default()).unwrap();
    let opts = PermutationOptions {
        fit: fit_opts,
        n_perm: 50,
        seed: 901,
        ..PermutationOptions::default()
    };
    let rep = permutation_test(&groups.data, &groups.labels, &opts, &[]).unwrap();
    let n = cfg.n;
    let hits = groups.planted.iter().filter(|&&(j, jp)| rep.s_flag[(j, jp)] == 1).count();
    let sensitivity = hits as f64 / groups.planted.len() as f64;
    let (mut other, mut flagged) = (0usize, 0usize);
    for j in 0..n {
        for jp in 0..n {
            if j != jp && !groups.planted.contains(&(j.min(jp), j.max(jp))) {
                other += 1;
                flagged += usize::from(rep.s_flag[(j, jp)]);
            }
        }
    }
    let null_density = flagged as f64 / other as f64;
    let pass = sensitivity >= 0.8 && null_density <= 0.10;
    report(
        9,
        pass,
        &format!("sensitivity {sensitivity:.2}, null flag density {null_density:.4}, {} dropped", rep.dropped.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_bench_is_deterministic() {
    let cfg = BenchConfig {
        simulation: SimConfig {
            n: 12,
            subjects: 20,
            times: 15,
            basis_dim: 6,
            s0: 0.1,
            seed: 1000,
            ..SimConfig::default()
        },
        replicates: 3,
        methods: Method::ALL.to_vec(),
        study: StudyOptions {
            fit: FitOptions {
                basis_dim: 6,
                ..FitOptions::default()
            },
            rank_grid: vec![1, 2],
            lambdas: LambdaSpec::Relative {
                count: 4,
                min_ratio: 0.1,
            },
            ..StudyOptions::default()
        },
    };
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let parallel = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = serial.install(|| cfg.run().unwrap().to_csv().unwrap());
    let b = parallel.install(|| cfg.run().unwrap().to_csv().unwrap());
    let c = cfg.run().unwrap().to_csv().unwrap();
    let pass = a == b && b == c && !a.is_empty();
    report(10, pass, &format!("{} CSV bytes identical across 3 runs", a.len()));
    assert!(pass);
}
