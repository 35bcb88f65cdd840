//! eBIC and the (R, λ) grid search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dedgereg_fit, DEdgeRegResult};
use crate::dataset::DynamicNetworkDataset;
use crate::error::{invalid, Error, Result};
use crate::family::Family;
use crate::glm::ModelParams;
use crate::problem::Problem;
use crate::tensor::{CpFactors, Tensor4};

use super::{fit_from, params_from_dedgereg, FitOptions, FitResult};

/// `N·ℓ̂ + [log(n²NT/2) + log(n²K(p+1)/2)]·[R(n+K) + Σ_l ‖B̂_l‖₀/2]`.
pub fn ebic_value(problem: &Problem, neg_loglik: f64, rank: usize, slopes: &Tensor4) -> f64 {
    let nsub = problem.n_subjects() as f64;
    let n = problem.n_nodes() as f64;
    let t = problem.n_times() as f64;
    let k = problem.basis_dim() as f64;
    let p = problem.n_covariates() as f64;
    let weight = (n * n * nsub * t / 2.0).ln() + (n * n * k * (p + 1.0) / 2.0).ln();
    let nnz = slopes.as_slice().iter().filter(|v| **v != 0.0).count() as f64;
    nsub * neg_loglik + weight * (rank as f64 * (n + k) + nnz / 2.0)
}

/// eBIC of a finished fit on `data`.
pub fn ebic(fitted: &FitResult, data: &DynamicNetworkDataset, family: Family, opts: &FitOptions) -> Result<f64> {
    let problem = Problem::new(data, family, &opts.basis()?)?;
    Ok(ebic_value(&problem, fitted.neg_loglik, fitted.rank, &fitted.params.slopes))
}

/// Smallest λ for which Γ = 0 satisfies the optimality conditions with the
/// baseline held at `baseline`.
pub fn lambda_max(problem: &Problem, baseline: &CpFactors) -> f64 {
    let n = problem.n_nodes();
    let zero = Tensor4::zeros(n, problem.basis_dim(), problem.n_covariates());
    let base = problem.base_predictor(baseline);
    let (slope, active) = problem.slope_predictor(&zero);
    let ev = problem.evaluate(&base, &slope, &active, false);
    let g = problem.gamma_gradient(&ev);
    let mut max = 0.0f64;
    for l in 0..problem.n_covariates() {
        for j in 0..n {
            for jp in 0..n {
                if j != jp {
                    max = max.max(g.fiber_norm(j, jp, l));
                }
            }
        }
    }
    max
}

/// `count` values spaced geometrically from `max` down to `max·min_ratio`.
pub fn lambda_grid(max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..count)
            .map(|i| max * min_ratio.powf(i as f64 / (count - 1) as f64))
            .collect(),
    }
}

/// λ values for a grid search: explicit, or relative to `lambda_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    Values(Vec<f64>),
    Relative { count: usize, min_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub rank: usize,
    pub lambda: f64,
    pub ebic: Option<f64>,
    pub neg_loglik: Option<f64>,
    pub support_size: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best_rank: usize,
    pub best_lambda: f64,
    pub best: FitResult,
    pub table: Vec<TuneEntry>,
}

/// Fits every (R, λ) combination and returns the eBIC minimizer. One DEdgeReg
/// start is shared by all cells; along each rank the λ values are visited in
/// descending order, each fit starting from the previous one.
pub fn tune(
    data: &DynamicNetworkDataset,
    family: Family,
    rank_grid: &[usize],
    lambdas: &LambdaSpec,
    opts: &FitOptions,
) -> Result<TuneResult> {
    let basis = opts.basis()?;
    let problem = Problem::new(data, family, &basis)?;
    let de = dedgereg_fit(data, family, &basis)?;
    tune_with(&problem, &de, rank_grid, lambdas, opts)
}

pub(crate) fn tune_with(
    problem: &Problem,
    de: &DEdgeRegResult,
    rank_grid: &[usize],
    lambdas: &LambdaSpec,
    opts: &FitOptions,
) -> Result<TuneResult> {
    if rank_grid.is_empty() {
        return invalid("empty rank grid");
    }
    match lambdas {
        LambdaSpec::Values(v) if v.is_empty() => return invalid("empty lambda grid"),
        LambdaSpec::Values(v) if v.iter().any(|l| !(*l >= 0.0 && l.is_finite())) => {
            return invalid("lambda values must be finite and non-negative")
        }
        LambdaSpec::Relative { count: 0, .. } => return invalid("empty lambda grid"),
        LambdaSpec::Relative { min_ratio, .. } if !(*min_ratio > 0.0 && *min_ratio <= 1.0) => {
            return invalid("min_ratio must lie in (0, 1]")
        }
        _ => {}
    }

    let path = |rank: usize| -> Vec<(TuneEntry, Option<FitResult>)> {
        let start = match params_from_dedgereg(de, rank) {
            Ok(s) => s,
            Err(e) => {
                let grid = match lambdas {
                    LambdaSpec::Values(v) => v.clone(),
                    LambdaSpec::Relative { count, .. } => vec![f64::NAN; *count],
                };
                return grid
                    .into_iter()
                    .map(|lambda| (failed_entry(rank, lambda, &e), None))
                    .collect();
            }
        };
        let mut grid = match lambdas {
            LambdaSpec::Values(v) => v.clone(),
            LambdaSpec::Relative { count, min_ratio } => {
                lambda_grid(lambda_max(problem, &start.baseline), *count, *min_ratio)
            }
        };
        grid.sort_by(|a, b| b.total_cmp(a));
        let mut warm: ModelParams = start.clone();
        let mut out = Vec::with_capacity(grid.len());
        for lambda in grid {
            let cell_opts = FitOptions {
                rank,
                lambda,
                ..opts.clone()
            };
            match fit_from(problem, warm.clone(), &cell_opts) {
                Ok(fit) => {
                    log::info!(
                        "tune: R={rank} lambda={lambda:.4e} eBIC={:.4} support={}",
                        fit.ebic,
                        fit.support.len()
                    );
                    warm = fit.params.clone();
                    out.push((
                        TuneEntry {
                            rank,
                            lambda,
                            ebic: Some(fit.ebic),
                            neg_loglik: Some(fit.neg_loglik),
                            support_size: Some(fit.support.len()),
                            converged: Some(fit.converged),
                            error: None,
                        },
                        Some(fit),
                    ));
                }
                Err(e) => {
                    log::warn!("tune: fit at R={rank}, lambda={lambda} failed: {e}");
                    out.push((failed_entry(rank, lambda, &e), None));
                }
            }
        }
        out
    };

    let mut ranks: Vec<usize> = rank_grid.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let cells: Vec<(TuneEntry, Option<FitResult>)> = ranks.par_iter().flat_map_iter(|&r| path(r)).collect();

    let mut best: Option<FitResult> = None;
    for (_, fit) in &cells {
        let Some(fit) = fit else { continue };
        let better = match &best {
            None => true,
            Some(b) => match fit.ebic.total_cmp(&b.ebic) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => (fit.rank, -fit.lambda) < (b.rank, -b.lambda),
            },
        };
        if better {
            best = Some(fit.clone());
        }
    }
    let table = cells.into_iter().map(|(e, _)| e).collect();
    let best = best.ok_or_else(|| Error::AllFailed("every (R, lambda) fit failed".into()))?;
    Ok(TuneResult {
        best_rank: best.rank,
        best_lambda: best.lambda,
        best,
        table,
    })
}

fn failed_entry(rank: usize, lambda: f64, e: &Error) -> TuneEntry {
    TuneEntry {
        rank,
        lambda,
        ebic: None,
        neg_loglik: None,
        support_size: None,
        converged: None,
        error: Some(e.to_string()),
    }
}
