use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dnetreg::baselines::{dedgereg_fit, edgereg_fit, select_edges, Correction};
use dnetreg::io::{read_csv, read_dataset, read_signal, write_dataset};
use dnetreg::network::{
    cluster_regions, networks_from_signals, observed_split_options, permutation_test, summed_baseline, Goi,
    PermutationOptions,
};
use dnetreg::simulation::{generate, BenchConfig, Method, SimConfig};
use dnetreg::{DynamicNetworkDataset, FitOptions, LambdaSpec, SplineBasis, Tensor3};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{family, family_or, fit_options, has_key, load, require_seed, set};
use crate::output::{out_dir, write_fit, write_json, write_matrix_csv, write_text};
use crate::{
    usage, BenchArgs, ClusterArgs, DedgeregArgs, EdgeregArgs, FitArgs, NetconstructArgs, PermuteArgs, SimulateArgs,
    TuneArgs,
};

fn load_data(dir: &Path) -> Result<DynamicNetworkDataset> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

#[derive(Serialize)]
struct TruthSummary {
    s0_realized: f64,
    weights: Vec<f64>,
    /// Node pairs `j < j'` with a nonzero first-covariate slope.
    support: Vec<(usize, usize)>,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let (mut cfg, raw): (SimConfig, _) = load(a.config.as_deref())?;
    require_seed(a.seed, has_key(&raw, "/seed"), "simulate")?;
    set(&mut cfg.n, a.n);
    set(&mut cfg.subjects, a.subjects);
    set(&mut cfg.times, a.times);
    set(&mut cfg.basis_dim, a.basis_dim);
    set(&mut cfg.rank, a.rank);
    set(&mut cfg.s0, a.s0);
    set(&mut cfg.covariates, a.covariates);
    set(&mut cfg.seed, a.seed);
    if let Some(f) = &a.family {
        cfg.family = family(f)?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let (data, truth) = generate(&cfg)?;
    let dir = out_dir(&a.out)?;
    write_dataset(&data, &dir)?;
    let truth_dir = out_dir(&dir.join("truth"))?;
    write_json(&truth_dir.join("config.json"), &cfg)?;
    truth.baseline.write_binary(&truth_dir.join("baseline.bin"))?;
    truth.slopes.write_binary(&truth_dir.join("slopes.bin"))?;
    let n = cfg.n;
    let support = (0..n)
        .flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp)))
        .filter(|&(j, jp)| truth.support[(j, jp)] != 0)
        .collect();
    write_json(
        &truth_dir.join("truth.json"),
        &TruthSummary {
            s0_realized: truth.s0_realized,
            weights: truth.factors.w.clone(),
            support,
        },
    )?;
    log::info!("wrote {} subjects to {}", cfg.subjects, dir.display());
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let mut opts = fit_options(&a.fit)?;
    set(&mut opts.rank, a.rank);
    set(&mut opts.lambda, a.lambda);
    opts.validate().map_err(|e| usage(e.to_string()))?;
    let data = load_data(&a.data)?;
    let fam = family_or(a.fit.family.as_deref(), data.family())?;
    let result = dnetreg::fit(&data, fam, &opts)?;
    let dir = out_dir(&a.out)?;
    write_fit(&dir, &result, &opts)
}

#[derive(Serialize)]
struct TuneSummary<'a> {
    best_rank: usize,
    best_lambda: f64,
    table: &'a [dnetreg::fit::TuneEntry],
}

pub fn tune(a: TuneArgs) -> Result<()> {
    let opts = fit_options(&a.fit)?;
    opts.validate().map_err(|e| usage(e.to_string()))?;
    let lambdas = match a.lambdas {
        Some(v) => LambdaSpec::Values(v),
        None => LambdaSpec::Relative {
            count: a.n_lambda,
            min_ratio: a.min_ratio,
        },
    };
    let data = load_data(&a.data)?;
    let fam = family_or(a.fit.family.as_deref(), data.family())?;
    let result = dnetreg::tune(&data, fam, &a.ranks, &lambdas, &opts)?;
    let dir = out_dir(&a.out)?;
    write_json(
        &dir.join("tune.json"),
        &TuneSummary {
            best_rank: result.best_rank,
            best_lambda: result.best_lambda,
            table: &result.table,
        },
    )?;
    let best_opts = FitOptions {
        rank: result.best_rank,
        lambda: result.best_lambda,
        ..opts
    };
    write_fit(&dir, &result.best, &best_opts)
}

#[derive(Serialize)]
struct EdgeRegSummary {
    correction: Correction,
    alpha: f64,
    nonconverged_fits: usize,
    /// Selected pairs `j < j'` for each slope covariate.
    selected: Vec<Vec<(usize, usize)>>,
}

pub fn edgereg(a: EdgeregArgs) -> Result<()> {
    let correction: Correction = a.correction.parse().map_err(|e| usage(format!("{e}")))?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("--alpha {} must lie in (0, 1)", a.alpha)));
    }
    let data = load_data(&a.data)?;
    let fam = family_or(a.family.as_deref(), data.family())?;
    let result = edgereg_fit(&data, fam)?;
    let dir = out_dir(&a.out)?;
    let n = data.n_nodes();
    let mut selected = Vec::new();
    for (l, c) in result.coefficients.iter().enumerate() {
        c.write_binary(&dir.join(format!("coef_{l}.bin")))?;
    }
    for (l, p) in result.p_values.iter().enumerate() {
        p.write_binary(&dir.join(format!("pvalues_{l}.bin")))?;
        let h = select_edges(p, a.alpha, correction)?;
        selected.push(
            (0..n)
                .flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp)))
                .filter(|&(j, jp)| h[(j, jp)] != 0)
                .collect(),
        );
    }
    write_json(
        &dir.join("edgereg.json"),
        &EdgeRegSummary {
            correction,
            alpha: a.alpha,
            nonconverged_fits: result.n_flagged(),
            selected,
        },
    )
}

#[derive(Serialize)]
struct DEdgeRegSummary {
    basis_dim: usize,
    degree: usize,
    converged_pairs: usize,
    fallbacks: usize,
}

pub fn dedgereg(a: DedgeregArgs) -> Result<()> {
    let opts = fit_options(&a.fit)?;
    let basis = opts.basis().map_err(|e| usage(e.to_string()))?;
    let data = load_data(&a.data)?;
    let fam = family_or(a.fit.family.as_deref(), data.family())?;
    let result = dedgereg_fit(&data, fam, &basis)?;
    let dir = out_dir(&a.out)?;
    for (l, c) in result.coefficients.iter().enumerate() {
        c.write_binary(&dir.join(format!("coef_{l}.bin")))?;
    }
    write_json(
        &dir.join("dedgereg.json"),
        &DEdgeRegSummary {
            basis_dim: opts.basis_dim,
            degree: opts.degree,
            converged_pairs: result.converged.iter().filter(|c| **c).count(),
            fallbacks: result.fallbacks,
        },
    )
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (mut cfg, raw): (BenchConfig, _) = load(a.config.as_deref())?;
    require_seed(a.seed, has_key(&raw, "/simulation/seed"), "bench")?;
    set(&mut cfg.replicates, a.reps);
    set(&mut cfg.simulation.seed, a.seed);
    if let Some(m) = a.methods {
        cfg.methods = m
            .iter()
            .map(|s| s.parse::<Method>().map_err(|e| usage(format!("{e}"))))
            .collect::<Result<_>>()?;
    }
    cfg.simulation.validate().map_err(|e| usage(e.to_string()))?;
    let report = cfg.run()?;
    let csv = report.to_csv()?;
    match a.out {
        Some(out) => {
            let dir = out_dir(&out)?;
            write_text(&dir.join("bench.csv"), &csv)?;
            let mut json = report.to_json()?;
            json.push('\n');
            write_text(&dir.join("bench.json"), &json)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NetConfig {
    window: usize,
    stride: usize,
    tau: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            window: 30,
            stride: 5,
            tau: 0.5,
        }
    }
}

fn signal_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && matches!(f.extension().and_then(|e| e.to_str()), Some("csv" | "bin")))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(usage("no signal files found"));
    }
    Ok(files)
}

pub fn netconstruct(a: NetconstructArgs) -> Result<()> {
    let (mut cfg, _): (NetConfig, _) = load(a.config.as_deref())?;
    set(&mut cfg.window, a.window);
    set(&mut cfg.stride, a.stride);
    set(&mut cfg.tau, a.tau);
    let files = signal_files(&a.signals)?;
    let signals = files
        .iter()
        .map(|f| read_signal(f).with_context(|| format!("reading signal {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let covariates = read_csv(&a.covariates, true)?;
    let (data, report) = networks_from_signals(&signals, covariates, cfg.window, cfg.stride, cfg.tau)?;
    let dir = out_dir(&a.out)?;
    write_dataset(&data, &dir)?;
    write_json(&dir.join("construction.json"), &report)?;
    log::info!("{} windows, mean density {:.4}", report.windows, report.mean_density);
    Ok(())
}

#[derive(Serialize)]
struct ClusterOutput {
    k: usize,
    embed_dim: usize,
    inertia: f64,
    labels: Vec<usize>,
}

#[derive(Deserialize)]
struct FittedRank {
    rank: usize,
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    require_seed(a.seed, false, "cluster")?;
    let (m, fitted_rank) = match (&a.matrix, &a.fit) {
        (Some(path), None) => (read_csv(path, false)?, None),
        (None, Some(fit_dir)) => {
            let data_dir = a.data.as_ref().ok_or_else(|| usage("--fit needs --data"))?;
            let data = load_data(data_dir)?;
            let opts: FitOptions = serde_json::from_str(
                &fs::read_to_string(fit_dir.join("options.json")).context("reading options.json")?,
            )?;
            let fitted: FittedRank =
                serde_json::from_str(&fs::read_to_string(fit_dir.join("fit.json")).context("reading fit.json")?)?;
            let b0 = Tensor3::read_binary(&fit_dir.join("baseline.bin"))?;
            let phi = SplineBasis::new(opts.basis_dim, opts.degree)?.basis_matrix(data.time_grid())?;
            (summed_baseline(&b0, &phi)?, Some(fitted.rank))
        }
        _ => return Err(usage("give exactly one of --matrix or --fit")),
    };
    let embed_dim = a
        .embed_dim
        .or(fitted_rank)
        .ok_or_else(|| usage("--embed-dim is required with --matrix"))?;
    let c = cluster_regions(&m, a.k, embed_dim, a.seed.unwrap_or_default()).map_err(|e| usage(e.to_string()))?;
    let dir = out_dir(&a.out)?;
    write_matrix_csv(&dir.join("matrix.csv"), &m)?;
    let mut csv = String::from("region,cluster\n");
    for (j, l) in c.labels.iter().enumerate() {
        csv.push_str(&format!("{j},{l}\n"));
    }
    write_text(&dir.join("clusters.csv"), &csv)?;
    write_json(
        &dir.join("clusters.json"),
        &ClusterOutput {
            k: a.k,
            embed_dim,
            inertia: c.inertia,
            labels: c.labels,
        },
    )
}

/// A graph of interest as written in a `--goi` file.
#[derive(Deserialize)]
#[serde(untagged)]
enum GoiSpec {
    Within { name: String, nodes: Vec<usize> },
    Between { name: String, a: Vec<usize>, b: Vec<usize> },
}

fn group_labels(a: &PermuteArgs, data: &DynamicNetworkDataset) -> Result<Vec<bool>> {
    if let Some(path) = &a.groups {
        let m = read_csv(path, true)?;
        if m.ncols() != 1 || m.nrows() != data.n_subjects() {
            bail!(
                "{}: expected {} rows with one column, found {}x{}",
                path.display(),
                data.n_subjects(),
                m.nrows(),
                m.ncols()
            );
        }
        if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
            bail!("{}: labels must be 0 or 1", path.display());
        }
        return Ok(m.iter().map(|v| *v == 1.0).collect());
    }
    let Some(l) = a.group_covariate else {
        return Err(usage("give --groups or --group-covariate"));
    };
    if l >= data.n_covariates() {
        return Err(usage(format!("--group-covariate {l} out of range (p = {})", data.n_covariates())));
    }
    let col: Vec<f64> = data.covariates().column(l).iter().copied().collect();
    let mut distinct = col.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() != 2 {
        bail!("covariate {l} takes {} distinct values, expected 2", distinct.len());
    }
    let hi = distinct[1];
    Ok(col.iter().map(|v| *v == hi).collect())
}

pub fn permute(a: PermuteArgs) -> Result<()> {
    let (mut opts, raw): (PermutationOptions, _) = load(a.config.as_deref())?;
    require_seed(a.seed, has_key(&raw, "/seed"), "permute")?;
    set(&mut opts.n_perm, a.n_perm);
    set(&mut opts.quantile, a.quantile);
    set(&mut opts.covariate, a.covariate);
    set(&mut opts.seed, a.seed);
    let data = load_data(&a.data)?;
    let labels = group_labels(&a, &data)?;
    if let (Some(rank), Some(lambda)) = (a.rank, a.lambda) {
        opts.fit.rank = rank;
        opts.fit.lambda = lambda;
    } else {
        let lambdas = LambdaSpec::Relative {
            count: a.n_lambda,
            min_ratio: a.min_ratio,
        };
        opts.fit = observed_split_options(&data, &labels, &a.ranks, &lambdas, &opts.fit)?;
    }
    let n = data.n_nodes();
    let mut gois = vec![Goi::whole(n)];
    if let Some(path) = &a.goi {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let specs: Vec<GoiSpec> =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for s in specs {
            gois.push(match s {
                GoiSpec::Within { name, nodes } => Goi::within(name, &nodes),
                GoiSpec::Between { name, a, b } => Goi::between(name, &a, &b),
            });
        }
    }
    let report = permutation_test(&data, &labels, &opts, &gois)?;
    let dir = out_dir(&a.out)?;
    write_json(&dir.join("options.json"), &opts)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("heatmap.csv"), &report.heatmap_csv()?)?;
    let mut goi_csv = String::from("goi,observed,empty,permuted_mean,permuted_sd\n");
    for g in &report.goi {
        goi_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            g.name,
            dnetreg::simulation::format_f64(g.observed.value),
            g.observed.empty,
            dnetreg::simulation::format_f64(g.permuted_mean),
            dnetreg::simulation::format_f64(g.permuted_sd)
        ));
    }
    write_text(&dir.join("goi.csv"), &goi_csv)?;
    let stack = DMatrix::from_fn(report.d_per.len(), n * n, |i, c| report.d_per[i][(c / n, c % n)]);
    write_matrix_csv(&dir.join("d_per.csv"), &stack)
}
