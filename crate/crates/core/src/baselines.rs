//! Element-wise competitors and edge-selection metrics.
//!
//! `EdgeReg` fits a GLM per unordered pair and time point; `DEdgeReg` fits a
//! spline-expanded GLM per unordered pair. Both are estimated by damped Newton
//! with coefficients clipped to `|θ| ≤ 30`, which keeps separated binary
//! cells finite.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::DynamicNetworkDataset;
use crate::error::{invalid, Error, Result};
use crate::family::Family;
use crate::spline::SplineBasis;
use crate::tensor::Tensor3;

/// Coefficient bound applied during element-wise fits.
pub const COEF_CLIP: f64 = 30.0;

struct GlmSolve {
    coef: DVector<f64>,
    hessian: DMatrix<f64>,
    converged: bool,
    clipped: bool,
}

fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let dim = h.nrows();
    let scale = (h.trace().abs() / dim.max(1) as f64).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let m = if ridge > 0.0 {
            h + DMatrix::identity(dim, dim) * ridge
        } else {
            h.clone()
        };
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    None
}

/// Damped Newton for a convex GLM likelihood with box clipping.
fn glm_newton(
    dim: usize,
    max_iters: usize,
    mut eval: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
    mut value: impl FnMut(&DVector<f64>) -> f64,
) -> Option<GlmSolve> {
    let mut coef = DVector::zeros(dim);
    let (mut f, mut g, mut h) = eval(&coef);
    let mut converged = false;
    for _ in 0..max_iters {
        if !f.is_finite() {
            return None;
        }
        let d = -solve_spd(&h, &g)?;
        let dec = -g.dot(&d);
        if dec <= 1e-12 * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = (&coef + &d * alpha).map(|v| v.clamp(-COEF_CLIP, COEF_CLIP));
            let fc = value(&cand);
            let pred = g.dot(&(&cand - &coef));
            if fc.is_finite() && fc <= f + 1e-4 * pred.min(0.0) && fc <= f {
                next = Some(cand);
                break;
            }
            alpha /= 2.0;
        }
        let Some(cand) = next else {
            break;
        };
        let step = (&cand - &coef).amax();
        coef = cand;
        let prev = f;
        (f, g, h) = eval(&coef);
        if step <= 1e-12 * (1.0 + coef.amax()) || (prev - f).abs() <= 1e-15 * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !coef.iter().all(|v| v.is_finite()) {
        return None;
    }
    let clipped = coef.iter().any(|v| v.abs() >= COEF_CLIP * (1.0 - 1e-12));
    Some(GlmSolve {
        coef,
        hessian: h,
        converged,
        clipped,
    })
}

/// Covariates with a leading intercept column, `N × (p+1)` row-major.
fn design_with_intercept(data: &DynamicNetworkDataset) -> (Vec<f64>, usize) {
    let x = data.covariates();
    let p1 = x.ncols() + 1;
    let mut out = Vec::with_capacity(x.nrows() * p1);
    for i in 0..x.nrows() {
        out.push(1.0);
        out.extend(x.row(i).iter().copied());
    }
    (out, p1)
}

fn check_design(data: &DynamicNetworkDataset) -> Result<()> {
    let nsub = data.n_subjects();
    let p1 = data.n_covariates() + 1;
    if nsub <= p1 {
        return invalid(format!("need N > p + 1 subjects (N={nsub}, p={})", p1 - 1));
    }
    let (z, _) = design_with_intercept(data);
    let zm = DMatrix::from_row_slice(nsub, p1, &z);
    let eig = SymmetricEigen::new(zm.transpose() * &zm).eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, v| m.max(*v));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(min > 1e-10 * max) {
        return Err(Error::InvalidData(
            "design matrix [1, X] is rank deficient".into(),
        ));
    }
    Ok(())
}

fn pair_list(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp)))
        .collect()
}

/// Per-(pair, time) GLM fits with Wald p-values for the slopes.
#[derive(Debug, Clone)]
pub struct EdgeRegResult {
    /// `p + 1` arrays of shape `n × n × T`: intercept first, then slopes.
    pub coefficients: Vec<Tensor3>,
    /// `p` arrays of shape `n × n × T`; the diagonal and flagged cells hold 1.
    pub p_values: Vec<Tensor3>,
    /// Per unordered pair (row-major over `j < j'`) and time point.
    pub converged: Vec<bool>,
    n: usize,
    t: usize,
}

impl EdgeRegResult {
    pub fn is_converged(&self, j: usize, jp: usize, h: usize) -> bool {
        let (a, b) = if j < jp { (j, jp) } else { (jp, j) };
        let q = a * self.n - a * (a + 1) / 2 + (b - a - 1);
        self.converged[q * self.t + h]
    }

    pub fn n_flagged(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

/// Two-sided Wald p-value. Gaussian fits estimate the dispersion and use a
/// t reference with `df` degrees of freedom.
fn wald_p(z: f64, df: Option<f64>) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    let p = match df {
        Some(df) => {
            let t = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
            2.0 * t.sf(z.abs())
        }
        None => statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2),
    };
    p.clamp(0.0, 1.0)
}

fn separated(family: Family, eta: f64) -> bool {
    match family {
        Family::BernoulliLogit => {
            let m = family.mean(eta);
            m < 1e-10 || m > 1.0 - 1e-10
        }
        Family::PoissonLog => family.mean(eta) < 1e-10,
        Family::GaussianIdentity => false,
    }
}

pub fn edgereg_fit(data: &DynamicNetworkDataset, family: Family) -> Result<EdgeRegResult> {
    check_design(data)?;
    let n = data.n_nodes();
    let t = data.n_times();
    let nsub = data.n_subjects();
    let (z, p1) = design_with_intercept(data);
    let p = p1 - 1;
    let pairs = pair_list(n);

    let cell = |j: usize, jp: usize, h: usize| -> (Vec<f64>, Vec<f64>, bool) {
        let y: Vec<f64> = (0..nsub).map(|i| data.edge(i, h, j, jp)).collect();
        let eta_of = |c: &DVector<f64>, i: usize| -> f64 {
            crate::tensor::dot(&z[i * p1..(i + 1) * p1], c.as_slice())
        };
        let value = |c: &DVector<f64>| -> f64 {
            (0..nsub)
                .map(|i| {
                    let e = eta_of(c, i);
                    family.cumulant(e) - y[i] * e
                })
                .sum()
        };
        let eval = |c: &DVector<f64>| {
            let mut f = 0.0;
            let mut g = DVector::zeros(p1);
            let mut hm = DMatrix::zeros(p1, p1);
            for i in 0..nsub {
                let zi = &z[i * p1..(i + 1) * p1];
                let e = eta_of(c, i);
                let (psi, m, v) = family.eval3(e);
                f += psi - y[i] * e;
                for a in 0..p1 {
                    g[a] += (m - y[i]) * zi[a];
                    for b in 0..p1 {
                        hm[(a, b)] += v * zi[a] * zi[b];
                    }
                }
            }
            (f, g, hm)
        };
        let Some(fit) = glm_newton(p1, 100, eval, value) else {
            return (vec![0.0; p1], vec![1.0; p], false);
        };
        let mut ok = fit.converged && !fit.clipped;
        if ok && (0..nsub).any(|i| separated(family, eta_of(&fit.coef, i))) {
            ok = false;
        }
        if !ok {
            return (fit.coef.iter().copied().collect(), vec![1.0; p], false);
        }
        let (disp, df) = if family == Family::GaussianIdentity {
            let rss: f64 = (0..nsub)
                .map(|i| (y[i] - eta_of(&fit.coef, i)).powi(2))
                .sum();
            let df = (nsub - p1) as f64;
            (rss / df, Some(df))
        } else {
            (1.0, None)
        };
        let pv = match fit.hessian.clone().try_inverse() {
            Some(cov) => (1..p1)
                .map(|a| {
                    let se = (disp * cov[(a, a)]).max(0.0).sqrt();
                    wald_p(fit.coef[a] / se, df)
                })
                .collect(),
            None => vec![1.0; p],
        };
        (fit.coef.iter().copied().collect(), pv, true)
    };

    let fits: Vec<Vec<(Vec<f64>, Vec<f64>, bool)>> = pairs
        .par_iter()
        .map(|&(j, jp)| (0..t).map(|h| cell(j, jp, h)).collect())
        .collect();

    let mut coefficients = vec![Tensor3::zeros(n, n, t); p1];
    let mut p_values = vec![Tensor3::zeros(n, n, t); p];
    for pv in p_values.iter_mut() {
        pv.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
    }
    let mut converged = Vec::with_capacity(pairs.len() * t);
    let mut flagged = 0;
    for (&(j, jp), cells) in pairs.iter().zip(fits) {
        for (h, (coef, pv, ok)) in cells.into_iter().enumerate() {
            for (a, c) in coef.iter().enumerate() {
                coefficients[a].set(j, jp, h, *c);
                coefficients[a].set(jp, j, h, *c);
            }
            for (l, v) in pv.iter().enumerate() {
                p_values[l].set(j, jp, h, *v);
                p_values[l].set(jp, j, h, *v);
            }
            flagged += usize::from(!ok);
            converged.push(ok);
        }
    }
    if flagged > 0 {
        log::info!("EdgeReg: {flagged} of {} cells flagged (separation or non-convergence)", converged.len());
    }
    Ok(EdgeRegResult {
        coefficients,
        p_values,
        converged,
        n,
        t,
    })
}

/// Per-pair spline GLM coefficients.
#[derive(Debug, Clone)]
pub struct DEdgeRegResult {
    /// `p + 1` tensors of shape `n × n × K`: `B̂0, B̂1, …, B̂p`.
    pub coefficients: Vec<Tensor3>,
    /// Per unordered pair (row-major over `j < j'`).
    pub converged: Vec<bool>,
    /// Pairs whose fit failed numerically and were set to zero.
    pub fallbacks: usize,
}

pub fn dedgereg_fit(data: &DynamicNetworkDataset, family: Family, basis: &SplineBasis) -> Result<DEdgeRegResult> {
    let n = data.n_nodes();
    let t = data.n_times();
    let nsub = data.n_subjects();
    let k = basis.dim();
    let (z, p1) = design_with_intercept(data);
    let dim = k * p1;
    if nsub * t <= dim {
        return invalid(format!(
            "DEdgeReg needs N*T > K(p+1) observations per edge (N*T={}, K(p+1)={dim})",
            nsub * t
        ));
    }
    let phi_m = basis.basis_matrix(data.time_grid())?;
    // Nonzero basis entries per time point.
    let phi: Vec<Vec<(usize, f64)>> = (0..t)
        .map(|h| {
            (0..k)
                .filter_map(|kk| {
                    let v = phi_m[(h, kk)];
                    (v != 0.0).then_some((kk, v))
                })
                .collect()
        })
        .collect();
    let pairs = pair_list(n);

    let fit_pair = |&(j, jp): &(usize, usize)| -> (Vec<f64>, bool, bool) {
        let y: Vec<f64> = (0..nsub)
            .flat_map(|i| (0..t).map(move |h| (i, h)))
            .map(|(i, h)| data.edge(i, h, j, jp))
            .collect();
        let time_coef = |theta: &DVector<f64>, h: usize| -> Vec<f64> {
            let mut c = vec![0.0; p1];
            for &(kk, v) in &phi[h] {
                for (a, ca) in c.iter_mut().enumerate() {
                    *ca += v * theta[kk * p1 + a];
                }
            }
            c
        };
        let value = |theta: &DVector<f64>| -> f64 {
            let mut f = 0.0;
            for h in 0..t {
                let c = time_coef(theta, h);
                for i in 0..nsub {
                    let e = crate::tensor::dot(&z[i * p1..(i + 1) * p1], &c);
                    f += family.cumulant(e) - y[i * t + h] * e;
                }
            }
            f
        };
        let eval = |theta: &DVector<f64>| {
            let mut f = 0.0;
            let mut g = DVector::zeros(dim);
            let mut hm = DMatrix::zeros(dim, dim);
            let mut gs = vec![0.0; p1];
            let mut s = vec![0.0; p1 * p1];
            for h in 0..t {
                let c = time_coef(theta, h);
                gs.iter_mut().for_each(|v| *v = 0.0);
                s.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..nsub {
                    let zi = &z[i * p1..(i + 1) * p1];
                    let e = crate::tensor::dot(zi, &c);
                    let (psi, m, v) = family.eval3(e);
                    let a = y[i * t + h];
                    f += psi - a * e;
                    for x in 0..p1 {
                        gs[x] += (m - a) * zi[x];
                        for w in 0..p1 {
                            s[x * p1 + w] += v * zi[x] * zi[w];
                        }
                    }
                }
                for &(k1, v1) in &phi[h] {
                    for x in 0..p1 {
                        g[k1 * p1 + x] += v1 * gs[x];
                    }
                    for &(k2, v2) in &phi[h] {
                        for x in 0..p1 {
                            for w in 0..p1 {
                                hm[(k1 * p1 + x, k2 * p1 + w)] += v1 * v2 * s[x * p1 + w];
                            }
                        }
                    }
                }
            }
            (f, g, hm)
        };
        match glm_newton(dim, 50, eval, value) {
            Some(fit) => (fit.coef.iter().copied().collect(), fit.converged && !fit.clipped, false),
            None => (vec![0.0; dim], false, true),
        }
    };

    let fits: Vec<(Vec<f64>, bool, bool)> = pairs.par_iter().map(fit_pair).collect();

    let mut coefficients = vec![Tensor3::zeros(n, n, k); p1];
    let mut converged = Vec::with_capacity(pairs.len());
    let mut fallbacks = 0;
    for (&(j, jp), (theta, ok, failed)) in pairs.iter().zip(fits) {
        if failed {
            log::warn!("DEdgeReg: fit for pair ({j},{jp}) failed; using zero coefficients");
            fallbacks += 1;
        }
        for (a, coef) in coefficients.iter_mut().enumerate() {
            let fiber: Vec<f64> = (0..k).map(|kk| theta[kk * p1 + a]).collect();
            coef.set_fiber_symmetric(j, jp, &fiber);
        }
        converged.push(ok);
    }
    let unconverged = converged.iter().filter(|c| !**c).count();
    if unconverged > fallbacks {
        log::info!(
            "DEdgeReg: {} of {} pairs did not converge or hit the coefficient bound",
            unconverged - fallbacks,
            pairs.len()
        );
    }
    Ok(DEdgeRegResult {
        coefficients,
        converged,
        fallbacks,
    })
}

/// Multiplicity correction for edge selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Bonferroni,
    Bh,
}

impl std::str::FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonferroni" | "bc" => Ok(Correction::Bonferroni),
            "bh" | "fdr" => Ok(Correction::Bh),
            other => invalid(format!("unknown correction {other:?}")),
        }
    }
}

/// Corrected p-values for one covariate, shape `n × n × T`.
///
/// Bonferroni multiplies by `n²T`. Benjamini–Hochberg runs over the
/// `n(n−1)T/2` distinct off-diagonal cells. Diagonal cells are set to 1.
pub fn adjust_p_values(p: &Tensor3, method: Correction) -> Tensor3 {
    let [n, _, t] = p.dims();
    let mut out = Tensor3::zeros(n, n, t);
    out.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
    match method {
        Correction::Bonferroni => {
            let m = (n * n * t) as f64;
            for j in 0..n {
                for jp in 0..n {
                    if j == jp {
                        continue;
                    }
                    for h in 0..t {
                        out.set(j, jp, h, (p.get(j, jp, h) * m).min(1.0));
                    }
                }
            }
        }
        Correction::Bh => {
            let mut cells: Vec<(f64, usize, usize, usize)> = Vec::new();
            for j in 0..n {
                for jp in (j + 1)..n {
                    for h in 0..t {
                        cells.push((p.get(j, jp, h), j, jp, h));
                    }
                }
            }
            cells.sort_by(|a, b| a.0.total_cmp(&b.0));
            let m = cells.len() as f64;
            let mut running = 1.0f64;
            for (rank, &(pv, j, jp, h)) in cells.iter().enumerate().rev() {
                running = running.min((pv * m / (rank + 1) as f64).min(1.0));
                out.set(j, jp, h, running);
                out.set(jp, j, h, running);
            }
        }
    }
    out
}

/// `H[j,j'] = 1` iff the smallest corrected p-value over time is `≤ alpha`.
pub fn select_edges(p: &Tensor3, alpha: f64, method: Correction) -> Result<DMatrix<u8>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("alpha = {alpha} must lie in (0, 1]"));
    }
    let adj = adjust_p_values(p, method);
    let [n, _, t] = adj.dims();
    Ok(DMatrix::from_fn(n, n, |j, jp| {
        if j == jp {
            return 0;
        }
        let min = (0..t).map(|h| adj.get(j, jp, h)).fold(f64::INFINITY, f64::min);
        u8::from(min <= alpha)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    /// `‖H∗H_true‖₀ / (n²s₀)`.
    pub tpr: f64,
    /// `(‖H‖₀ − ‖H∗H_true‖₀) / (n²s₀)`.
    pub fpr: f64,
    /// False positives over true negatives among off-diagonal cells.
    pub fpr_conventional: f64,
}

/// Selection rates with the positive-count normalization `n²s₀`.
pub fn tpr_fpr(h: &DMatrix<u8>, h_true: &DMatrix<u8>, s0: f64) -> Result<SelectionMetrics> {
    if h.shape() != h_true.shape() || h.nrows() != h.ncols() {
        return Err(Error::Shape(format!(
            "selection {:?} vs truth {:?}",
            h.shape(),
            h_true.shape()
        )));
    }
    if !(s0 > 0.0) {
        return invalid("s0 must be positive");
    }
    let n = h.nrows();
    let denom = (n * n) as f64 * s0;
    let nnz = h.iter().filter(|v| **v != 0).count();
    let tp = h
        .iter()
        .zip(h_true.iter())
        .filter(|(a, b)| **a != 0 && **b != 0)
        .count();
    let negatives = (0..n)
        .flat_map(|j| (0..n).map(move |jp| (j, jp)))
        .filter(|&(j, jp)| j != jp && h_true[(j, jp)] == 0)
        .count();
    let fp_offdiag = (0..n)
        .flat_map(|j| (0..n).map(move |jp| (j, jp)))
        .filter(|&(j, jp)| j != jp && h_true[(j, jp)] == 0 && h[(j, jp)] != 0)
        .count();
    Ok(SelectionMetrics {
        tpr: tp as f64 / denom,
        fpr: (nnz - tp) as f64 / denom,
        fpr_conventional: if negatives == 0 {
            0.0
        } else {
            fp_offdiag as f64 / negatives as f64
        },
    })
}
