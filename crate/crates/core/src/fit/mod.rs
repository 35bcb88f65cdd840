//! Alternating estimation of the CP baseline and the sparse slope tensor.
//!
//! Each outer iteration updates every `u1_r`, then every `u3_r`, by damped
//! Newton with the other blocks fixed, rescales the factors to unit columns
//! and finally runs FISTA over Γ. The penalized objective never increases
//! from one recorded iteration to the next.

mod factor;
mod fista;
mod tune;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{dedgereg_fit, DEdgeRegResult};
use crate::cp::cp_decompose_offdiagonal;
use crate::dataset::DynamicNetworkDataset;
use crate::error::{invalid, Error, Result};
use crate::family::Family;
use crate::glm::{penalty, ModelParams};
use crate::problem::Problem;
use crate::spline::SplineBasis;
use crate::tensor::{cp_reconstruct, fiber_group_norms, Tensor3, Tensor4};

pub use factor::{renormalize, update_factor_u1r, update_factor_u3r, FactorUpdate, FROZEN_WEIGHT};
pub use fista::{fista_gamma, group_shrink, next_momentum, FistaOutcome};
pub use tune::{ebic, ebic_value, lambda_grid, lambda_max, tune, LambdaSpec, TuneEntry, TuneResult};
pub(crate) use tune::tune_with;

/// FISTA step size: the analytic `1/L` bound (with backtracking) or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub rank: usize,
    pub lambda: f64,
    /// Basis dimension `K`.
    pub basis_dim: usize,
    pub degree: usize,
    pub max_outer_iters: usize,
    pub outer_tol: f64,
    pub fista_max_iters: usize,
    pub fista_tol: f64,
    pub newton_max_iters: usize,
    pub step: StepSize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rank: 2,
            lambda: 0.0,
            basis_dim: 8,
            degree: 3,
            max_outer_iters: 100,
            outer_tol: 1e-6,
            fista_max_iters: 500,
            fista_tol: 1e-8,
            newton_max_iters: 20,
            step: StepSize::Auto,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return invalid("rank must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda = {} must be finite and non-negative", self.lambda));
        }
        if !(self.outer_tol > 0.0 && self.fista_tol > 0.0) {
            return invalid("tolerances must be positive");
        }
        if self.max_outer_iters == 0 || self.fista_max_iters == 0 || self.newton_max_iters == 0 {
            return invalid("iteration caps must be at least 1");
        }
        if let StepSize::Fixed(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("step = {s} must be positive"));
            }
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<SplineBasis> {
        SplineBasis::new(self.basis_dim, self.degree)
    }
}

/// A nonzero slope fiber `(l, j, j')` with `j < j'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub l: usize,
    pub j: usize,
    pub jp: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub rank: usize,
    pub lambda: f64,
    /// Penalized objective after initialization and after each outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub neg_loglik: f64,
    pub ebic: f64,
    pub support: Vec<SupportEntry>,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    rank: usize,
    lambda: f64,
    converged: bool,
    outer_iterations: usize,
    neg_loglik: f64,
    ebic: f64,
    weights: &'a [f64],
    trace: &'a [f64],
    support: &'a [SupportEntry],
    wall_time_secs: f64,
}

impl FitResult {
    /// `B̂0` expanded from the fitted factors.
    pub fn baseline_tensor(&self) -> Tensor3 {
        cp_reconstruct(&self.params.baseline)
    }

    /// Scalars, trace and support as JSON. Wall time is included only when
    /// asked, so that repeated runs can be compared byte for byte.
    pub fn to_json(&self, with_timing: bool) -> Result<String> {
        let s = FitSummary {
            rank: self.rank,
            lambda: self.lambda,
            converged: self.converged,
            outer_iterations: self.outer_iterations,
            neg_loglik: self.neg_loglik,
            ebic: self.ebic,
            weights: &self.params.baseline.w,
            trace: &self.trace,
            support: &self.support,
            wall_time_secs: if with_timing { self.wall_time_secs } else { 0.0 },
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }
}

/// Nonzero fibers of Γ over `j < j'`.
pub fn support_of(g: &Tensor4) -> Vec<SupportEntry> {
    let norms = fiber_group_norms(g);
    let n = g.n();
    let mut out = Vec::new();
    for (l, m) in norms.iter().enumerate() {
        for j in 0..n {
            for jp in (j + 1)..n {
                if m[(j, jp)] > 0.0 || m[(jp, j)] > 0.0 {
                    out.push(SupportEntry { l, j, jp });
                }
            }
        }
    }
    out
}

/// Builds starting parameters from DEdgeReg coefficients: CP of `B̂0` at the
/// requested rank, slopes copied with diagonals cleared.
pub fn params_from_dedgereg(de: &DEdgeRegResult, rank: usize) -> Result<ModelParams> {
    let b0 = &de.coefficients[0];
    let [n, _, k] = b0.dims();
    let cp = cp_decompose_offdiagonal(b0, rank, 500, 1e-10)?;
    log::debug!(
        "initial CP at rank {rank}: off-diagonal relative error {:.3e} after {} sweeps",
        cp.relative_error,
        cp.sweeps
    );
    let p = de.coefficients.len() - 1;
    let mut slopes = Tensor4::zeros(n, k, p);
    for (l, b) in de.coefficients[1..].iter().enumerate() {
        let mut s = b.clone();
        for j in 0..n {
            s.fiber_mut(j, j).iter_mut().for_each(|v| *v = 0.0);
        }
        slopes.set_slice(l, &s)?;
    }
    Ok(ModelParams {
        baseline: cp.factors,
        slopes,
    })
}

/// Element-wise spline GLM start followed by a CP decomposition of `B̂0`.
pub fn initialize(
    data: &DynamicNetworkDataset,
    basis: &SplineBasis,
    rank: usize,
    family: Family,
) -> Result<ModelParams> {
    let de = dedgereg_fit(data, family, basis)?;
    params_from_dedgereg(&de, rank)
}

pub(crate) fn penalized(problem: &Problem, params: &ModelParams, lambda: f64) -> Result<f64> {
    let pred = problem.predictor(&params.baseline, &params.slopes)?;
    Ok(problem.value(&pred.base, &pred.slope, &pred.active) + lambda * penalty(&params.slopes))
}

/// Full estimation: initialize, then alternate until convergence.
pub fn fit(data: &DynamicNetworkDataset, family: Family, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let basis = opts.basis()?;
    let problem = Problem::new(data, family, &basis)?;
    let start = initialize(data, &basis, opts.rank, family)?;
    fit_from(&problem, start, opts)
}

/// Outer loop from given starting parameters.
pub fn fit_from(problem: &Problem, start: ModelParams, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let timer = Instant::now();
    let lambda = opts.lambda;
    let rank = start.baseline.rank();
    let mut params = start;
    params.validate()?;
    let mut current = penalized(problem, &params, lambda)?;
    if !current.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective at the starting point is {current} (weights {:?})",
            params.baseline.w
        )));
    }
    let mut trace = vec![current];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_outer_iters {
        iterations += 1;
        let mut next = params.clone();
        for r in 0..rank {
            if next.baseline.w[r] == 0.0 {
                continue;
            }
            let up = update_factor_u1r(problem, &next.baseline, &next.slopes, r, opts.newton_max_iters);
            next.baseline.u1.set_column(r, &up.vector);
        }
        for r in 0..rank {
            if next.baseline.w[r] == 0.0 {
                continue;
            }
            let up = update_factor_u3r(problem, &next.baseline, &next.slopes, r, opts.newton_max_iters);
            next.baseline.u3.set_column(r, &up.vector);
        }
        renormalize(&mut next.baseline);
        crate::cp::renormalize_columns(&mut next.baseline);

        let base = problem.base_predictor(&next.baseline);
        let fista = fista_gamma(
            problem,
            &base,
            &next.slopes,
            lambda,
            opts.step,
            opts.fista_max_iters,
            opts.fista_tol,
        );
        next.slopes = fista.gamma;

        let value = penalized(problem, &next, lambda)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective {value} at outer iteration {iterations} (weights {:?}, previous objective {current})",
                next.baseline.w
            )));
        }
        if value > current {
            // Rounding in the block updates; keep the previous iterate.
            log::debug!("outer iteration {iterations} raised the objective by {:e}; stopping", value - current);
            converged = true;
            break;
        }
        let rel = (current - value) / current.abs().max(1.0);
        params = next;
        current = value;
        trace.push(value);
        log::debug!("outer iteration {iterations}: objective {value:.10e}");
        if rel < opts.outer_tol {
            converged = true;
            break;
        }
    }

    let pred = problem.predictor(&params.baseline, &params.slopes)?;
    let nll = problem.value(&pred.base, &pred.slope, &pred.active);
    let support = support_of(&params.slopes);
    let ebic = ebic_value(problem, nll, rank, &params.slopes);
    Ok(FitResult {
        params,
        rank,
        lambda,
        trace,
        converged,
        outer_iterations: iterations,
        neg_loglik: nll,
        ebic,
        support,
        wall_time_secs: timer.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{noiseless_gaussian, random_dataset, random_params};

    #[test]
    fn initialization_recovers_noiseless_rank_one_baseline() {
        let basis = SplineBasis::cubic(5).unwrap();
        let params = random_params(6, 5, 0, 1, 31, 0.8);
        let data = noiseless_gaussian(&params, &basis, 3, 15, 32);
        let init = initialize(&data, &basis, 1, Family::GaussianIdentity).unwrap();
        init.validate().unwrap();
        let truth = params.baseline_tensor();
        let rel = init.baseline_tensor().distance(&truth).unwrap() / truth.frobenius_norm();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn trace_is_non_increasing_and_deterministic() {
        let data = random_dataset(Family::BernoulliLogit, 12, 6, 1, 10, 41);
        let opts = FitOptions {
            rank: 2,
            lambda: 0.02,
            basis_dim: 4,
            ..FitOptions::default()
        };
        let a = fit(&data, Family::BernoulliLogit, &opts).unwrap();
        for w in a.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        a.params.validate().unwrap();
        let b = fit(&data, Family::BernoulliLogit, &opts).unwrap();
        assert_eq!(
            a.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let norms = fiber_group_norms(&a.params.slopes);
        for e in &a.support {
            assert!(norms[e.l][(e.j, e.jp)] > 0.0);
        }
        let count = (0..6).flat_map(|j| ((j + 1)..6).map(move |jp| (j, jp)))
            .filter(|&(j, jp)| norms[0][(j, jp)] > 0.0)
            .count();
        assert_eq!(count, a.support.len());
    }

    #[test]
    fn no_covariates_gives_empty_slopes() {
        let data = random_dataset(Family::BernoulliLogit, 8, 5, 0, 8, 42);
        let opts = FitOptions {
            rank: 1,
            lambda: 1.0,
            basis_dim: 4,
            ..FitOptions::default()
        };
        let r = fit(&data, Family::BernoulliLogit, &opts).unwrap();
        assert!(r.params.slopes.is_zero());
        assert!(r.support.is_empty());
    }

    #[test]
    fn all_zero_binary_data_stays_bounded() {
        let data = crate::dataset::DynamicNetworkDataset::new(
            Family::BernoulliLogit,
            4,
            crate::spline::equispaced_grid(6),
            crate::dataset::Adjacency::U8(vec![0; 5 * 6 * 16]),
            nalgebra::DMatrix::from_column_slice(5, 1, &[-1.0, 0.2, 0.5, 1.1, -0.8]),
        )
        .unwrap();
        let basis = SplineBasis::cubic(4).unwrap();
        let init = initialize(&data, &basis, 1, Family::BernoulliLogit).unwrap();
        init.validate().unwrap();
        let b0 = init.baseline_tensor();
        assert!(b0.as_slice().iter().all(|v| v.abs() <= 30.0 + 1e-9));
        assert!(init.slopes.as_slice().iter().all(|v| v.abs() <= 30.0));
        // Off-diagonal baseline entries go strongly negative.
        assert!(b0.get(0, 1, 0) < -5.0);
    }

    #[test]
    fn rejects_bad_options() {
        let data = random_dataset(Family::BernoulliLogit, 6, 4, 1, 6, 43);
        for opts in [
            FitOptions { rank: 0, ..FitOptions::default() },
            FitOptions { lambda: -1.0, ..FitOptions::default() },
            FitOptions { max_outer_iters: 0, ..FitOptions::default() },
            FitOptions { step: StepSize::Fixed(0.0), ..FitOptions::default() },
        ] {
            assert!(fit(&data, Family::BernoulliLogit, &opts).is_err());
        }
    }
}
