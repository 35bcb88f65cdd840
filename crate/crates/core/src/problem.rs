//! Likelihood engine shared by the estimators.
//!
//! The negative log-likelihood only touches the data through
//! `Σ_i A_i` and `Σ_i x_il A_i` per unordered pair and time point, so those
//! sums are computed once. What remains per evaluation is `Σ_i ψ(η_i)`, and
//! for pairs whose slope fibers are all zero `η_i` does not depend on the
//! subject, which collapses the subject loop to a single cumulant call.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::dataset::DynamicNetworkDataset;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::spline::SplineBasis;
use crate::tensor::{CpFactors, Tensor4};

/// Data-derived state for evaluating the model likelihood and its gradients.
#[derive(Debug, Clone)]
pub struct Problem {
    family: Family,
    n: usize,
    t: usize,
    k: usize,
    p: usize,
    n_subjects: usize,
    pairs: Vec<(usize, usize)>,
    /// T × K basis values, row-major.
    phi: Vec<f64>,
    /// N × p covariates, row-major.
    x: Vec<f64>,
    sum_x: Vec<f64>,
    /// Σ_i A_i per (pair, time).
    sum_a: Vec<f64>,
    /// Σ_i x_il A_i per (pair, time, covariate).
    sum_xa: Vec<f64>,
    phi_gram_max_eig: f64,
    x_gram_max_eig: f64,
}

/// Linear predictor split into the baseline part `a = (B0 ×₃ φ)_{jj'}` and
/// the slope parts `b_l = (B_l ×₃ φ)_{jj'}`, both laid out per (pair, time).
#[derive(Debug, Clone)]
pub struct Predictor {
    pub base: Vec<f64>,
    pub slope: Vec<f64>,
    /// Pairs with at least one nonzero slope fiber.
    pub active: Vec<bool>,
}

/// Value and aggregated residuals from one pass over the data.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// `Σ_i (A_i − ψ'(η_i))` per (pair, time).
    pub resid: Vec<f64>,
    /// `Σ_i x_il (A_i − ψ'(η_i))` per (pair, time, covariate).
    pub resid_x: Vec<f64>,
    /// `Σ_i ψ''(η_i)` per (pair, time); empty unless requested.
    pub curvature: Vec<f64>,
}

impl Problem {
    pub fn new(data: &DynamicNetworkDataset, family: Family, basis: &SplineBasis) -> Result<Self> {
        let n = data.n_nodes();
        let t = data.n_times();
        let p = data.n_covariates();
        let n_subjects = data.n_subjects();
        let k = basis.dim();
        if family != data.family() {
            // Data may still be admissible, e.g. binary edges under a gaussian fit.
            for i in 0..n_subjects {
                for h in 0..t {
                    for j in 0..n {
                        for jp in (j + 1)..n {
                            let a = data.edge(i, h, j, jp);
                            if !family.admits(a) {
                                return Err(Error::InvalidData(format!(
                                    "edge value {a} (subject {i}, time {h}, pair ({j},{jp})) is not valid for {family}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        let phi_m = basis.basis_matrix(data.time_grid())?;
        let phi: Vec<f64> = (0..t)
            .flat_map(|h| (0..k).map(move |kk| (h, kk)))
            .map(|(h, kk)| phi_m[(h, kk)])
            .collect();
        let xm = data.covariates();
        let x: Vec<f64> = (0..n_subjects)
            .flat_map(|i| (0..p).map(move |l| (i, l)))
            .map(|(i, l)| xm[(i, l)])
            .collect();
        let sum_x = (0..p).map(|l| xm.column(l).sum()).collect();

        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp)))
            .collect();
        let np = pairs.len();
        let mut sum_a = vec![0.0; np * t];
        let mut sum_xa = vec![0.0; np * t * p];
        for i in 0..n_subjects {
            let xi = &x[i * p..(i + 1) * p];
            for h in 0..t {
                for (q, &(j, jp)) in pairs.iter().enumerate() {
                    let a = data.edge(i, h, j, jp);
                    if a == 0.0 {
                        continue;
                    }
                    let cell = q * t + h;
                    sum_a[cell] += a;
                    for l in 0..p {
                        sum_xa[cell * p + l] += xi[l] * a;
                    }
                }
            }
        }

        let phi_gram = phi_m.transpose() * &phi_m;
        let phi_gram_max_eig = max_eigenvalue(phi_gram);
        let x_gram_max_eig = if p == 0 {
            0.0
        } else {
            max_eigenvalue(xm.transpose() * xm / n_subjects as f64)
        };

        Ok(Self {
            family,
            n,
            t,
            k,
            p,
            n_subjects,
            pairs,
            phi,
            x,
            sum_x,
            sum_a,
            sum_xa,
            phi_gram_max_eig,
            x_gram_max_eig,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.t
    }

    pub fn basis_dim(&self) -> usize {
        self.k
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `φ(t_h)` as a slice of length K.
    pub fn phi_row(&self, h: usize) -> &[f64] {
        &self.phi[h * self.k..(h + 1) * self.k]
    }

    /// Largest eigenvalue of `Σ_h φ(t_h) φ(t_h)ᵀ`.
    pub fn phi_gram_max_eig(&self) -> f64 {
        self.phi_gram_max_eig
    }

    /// Largest eigenvalue of `XᵀX / N`.
    pub fn x_gram_max_eig(&self) -> f64 {
        self.x_gram_max_eig
    }

    /// `c[h, r] = φ(t_h) · u3_r`, T × R row-major.
    fn time_loadings(&self, f: &CpFactors) -> Vec<f64> {
        let rank = f.rank();
        let mut c = vec![0.0; self.t * rank];
        for h in 0..self.t {
            let row = self.phi_row(h);
            for r in 0..rank {
                c[h * rank + r] = (0..self.k).map(|kk| row[kk] * f.u3[(kk, r)]).sum();
            }
        }
        c
    }

    /// Baseline predictor `(B0 ×₃ φ(t_h))_{jj'}` per (pair, time).
    pub fn base_predictor(&self, f: &CpFactors) -> Vec<f64> {
        self.base_predictor_without(f, None)
    }

    /// Baseline predictor leaving out component `skip`.
    pub fn base_predictor_without(&self, f: &CpFactors, skip: Option<usize>) -> Vec<f64> {
        let rank = f.rank();
        let c = self.time_loadings(f);
        let mut base = vec![0.0; self.pairs.len() * self.t];
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let coef: Vec<f64> = (0..rank)
                .map(|r| {
                    if Some(r) == skip {
                        0.0
                    } else {
                        f.w[r] * f.u1[(j, r)] * f.u1[(jp, r)]
                    }
                })
                .collect();
            let out = &mut base[q * self.t..(q + 1) * self.t];
            for (h, v) in out.iter_mut().enumerate() {
                *v = (0..rank).map(|r| coef[r] * c[h * rank + r]).sum();
            }
        }
        base
    }

    /// Contribution of component `r` alone, with `u1_r`, `u3_r` replaced by
    /// the given (not necessarily unit) vectors.
    pub fn component_predictor(&self, w: f64, u1: &[f64], u3: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = (0..self.t)
            .map(|h| crate::tensor::dot(self.phi_row(h), u3))
            .collect();
        let mut out = vec![0.0; self.pairs.len() * self.t];
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let coef = w * u1[j] * u1[jp];
            if coef == 0.0 {
                continue;
            }
            for (h, v) in out[q * self.t..(q + 1) * self.t].iter_mut().enumerate() {
                *v = coef * c[h];
            }
        }
        out
    }

    /// Slope predictor from Γ, using the symmetric part of each slice.
    pub fn slope_predictor(&self, g: &Tensor4) -> (Vec<f64>, Vec<bool>) {
        let (t, k, p) = (self.t, self.k, self.p);
        let mut slope = vec![0.0; self.pairs.len() * t * p];
        let mut active = vec![false; self.pairs.len()];
        let mut fibers = vec![0.0; k * p];
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let mut any = false;
            for kk in 0..k {
                for l in 0..p {
                    let v = 0.5 * (g.get(j, jp, kk, l) + g.get(jp, j, kk, l));
                    fibers[kk * p + l] = v;
                    any |= v != 0.0;
                }
            }
            if !any {
                continue;
            }
            active[q] = true;
            for h in 0..t {
                let row = self.phi_row(h);
                let out = &mut slope[(q * t + h) * p..(q * t + h + 1) * p];
                for (kk, phi) in row.iter().enumerate() {
                    if *phi == 0.0 {
                        continue;
                    }
                    for l in 0..p {
                        out[l] += phi * fibers[kk * p + l];
                    }
                }
            }
        }
        (slope, active)
    }

    pub fn predictor(&self, f: &CpFactors, g: &Tensor4) -> Result<Predictor> {
        self.check_params(f, g)?;
        let base = self.base_predictor(f);
        let (slope, active) = self.slope_predictor(g);
        Ok(Predictor {
            base,
            slope,
            active,
        })
    }

    pub fn check_params(&self, f: &CpFactors, g: &Tensor4) -> Result<()> {
        if f.n() != self.n || f.basis_dim() != self.k {
            return Err(Error::Shape(format!(
                "baseline factors are {}x{} (n x K), data needs {}x{}",
                f.n(),
                f.basis_dim(),
                self.n,
                self.k
            )));
        }
        if g.dims() != [self.n, self.n, self.k, self.p] {
            return Err(Error::Shape(format!(
                "slope tensor is {:?}, data needs {:?}",
                g.dims(),
                [self.n, self.n, self.k, self.p]
            )));
        }
        Ok(())
    }

    /// Negative log-likelihood only.
    pub fn value(&self, base: &[f64], slope: &[f64], active: &[bool]) -> f64 {
        self.pass(base, slope, active, false, false).value
    }

    /// Value plus aggregated residuals, and curvature sums when asked.
    pub fn evaluate(&self, base: &[f64], slope: &[f64], active: &[bool], curvature: bool) -> Evaluation {
        self.pass(base, slope, active, true, curvature)
    }

    fn pass(&self, base: &[f64], slope: &[f64], active: &[bool], grad: bool, curv: bool) -> Evaluation {
        let (t, p, nsub) = (self.t, self.p, self.n_subjects);
        let np = self.pairs.len();
        let family = self.family;

        let work = |q: usize| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut total = 0.0;
            let mut r0 = if grad { vec![0.0; t] } else { Vec::new() };
            let mut rx = if grad { vec![0.0; t * p] } else { Vec::new() };
            let mut w0 = if curv { vec![0.0; t] } else { Vec::new() };
            let mut sx = vec![0.0; p];
            for h in 0..t {
                let cell = q * t + h;
                let a = base[cell];
                let b = &slope[cell * p..(cell + 1) * p];
                let (sum_psi, sum_mean, sum_var) = if active[q] {
                    let mut s = (0.0, 0.0, 0.0);
                    sx.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..nsub {
                        let xi = &self.x[i * p..(i + 1) * p];
                        let eta = a + crate::tensor::dot(xi, b);
                        let (psi, mean, var) = family.eval3(eta);
                        s.0 += psi;
                        s.1 += mean;
                        s.2 += var;
                        for l in 0..p {
                            sx[l] += xi[l] * mean;
                        }
                    }
                    s
                } else {
                    let (psi, mean, var) = family.eval3(a);
                    for l in 0..p {
                        sx[l] = self.sum_x[l] * mean;
                    }
                    let nf = nsub as f64;
                    (nf * psi, nf * mean, nf * var)
                };
                let xa = &self.sum_xa[cell * p..(cell + 1) * p];
                total += sum_psi - self.sum_a[cell] * a - crate::tensor::dot(xa, b);
                if grad {
                    r0[h] = self.sum_a[cell] - sum_mean;
                    for l in 0..p {
                        rx[h * p + l] = xa[l] - sx[l];
                    }
                }
                if curv {
                    w0[h] = sum_var;
                }
            }
            (total, r0, rx, w0)
        };

        let parts: Vec<_> = (0..np).into_par_iter().map(work).collect();

        // Fixed-order reduction keeps results independent of scheduling.
        let mut value = 0.0;
        let mut resid = Vec::with_capacity(if grad { np * t } else { 0 });
        let mut resid_x = Vec::with_capacity(if grad { np * t * p } else { 0 });
        let mut curvature = Vec::with_capacity(if curv { np * t } else { 0 });
        for (v, r0, rx, w0) in parts {
            value += v;
            resid.extend_from_slice(&r0);
            resid_x.extend_from_slice(&rx);
            curvature.extend_from_slice(&w0);
        }
        Evaluation {
            value: value / nsub as f64,
            resid,
            resid_x,
            curvature,
        }
    }

    /// Gradient of ℓ with respect to Γ in the symmetric-tensor geometry:
    /// both mirrored entries carry half the pair derivative, so that
    /// `⟨∇, D⟩_F` is the directional derivative along any symmetric `D`.
    pub fn gamma_gradient(&self, ev: &Evaluation) -> Tensor4 {
        let (t, k, p) = (self.t, self.k, self.p);
        let mut g = Tensor4::zeros(self.n, k, p);
        let scale = -0.5 / self.n_subjects as f64;
        let mut fiber = vec![0.0; k * p];
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            fiber.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..t {
                let row = self.phi_row(h);
                let rx = &ev.resid_x[(q * t + h) * p..(q * t + h + 1) * p];
                for (kk, phi) in row.iter().enumerate() {
                    if *phi == 0.0 {
                        continue;
                    }
                    for l in 0..p {
                        fiber[kk * p + l] += phi * rx[l];
                    }
                }
            }
            for kk in 0..k {
                for l in 0..p {
                    let v = scale * fiber[kk * p + l];
                    g.set(j, jp, kk, l, v);
                    g.set(jp, j, kk, l, v);
                }
            }
        }
        g
    }

    /// `∂ℓ/∂u1_r` at the factors `(w_r, u1, u3)` for component `r`.
    pub fn u1_gradient(&self, ev: &Evaluation, w: f64, u1: &[f64], u3: &[f64]) -> DVector<f64> {
        let c: Vec<f64> = (0..self.t)
            .map(|h| crate::tensor::dot(self.phi_row(h), u3))
            .collect();
        let mut g = DVector::zeros(self.n);
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let s: f64 = (0..self.t).map(|h| c[h] * ev.resid[q * self.t + h]).sum();
            g[j] += s * u1[jp];
            g[jp] += s * u1[j];
        }
        g * (-w / self.n_subjects as f64)
    }

    /// `∂ℓ/∂u3_r` at the factors `(w_r, u1, u3)` for component `r`.
    pub fn u3_gradient(&self, ev: &Evaluation, w: f64, u1: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.k);
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let uu = u1[j] * u1[jp];
            if uu == 0.0 {
                continue;
            }
            for h in 0..self.t {
                let s = uu * ev.resid[q * self.t + h];
                for (kk, phi) in self.phi_row(h).iter().enumerate() {
                    g[kk] += phi * s;
                }
            }
        }
        g * (-w / self.n_subjects as f64)
    }

    /// Hessian of ℓ in `u1_r`: the Gauss–Newton part plus the residual term
    /// from the product `u_j u_j'`. Not positive definite in general.
    pub fn u1_hessian(&self, ev: &Evaluation, w: f64, u1: &[f64], u3: &[f64]) -> DMatrix<f64> {
        let c: Vec<f64> = (0..self.t)
            .map(|h| crate::tensor::dot(self.phi_row(h), u3))
            .collect();
        let nf = self.n_subjects as f64;
        let mut gn = DMatrix::zeros(self.n, self.n);
        let mut extra = DMatrix::zeros(self.n, self.n);
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let mut wsum = 0.0;
            let mut rsum = 0.0;
            for h in 0..self.t {
                let cell = q * self.t + h;
                wsum += c[h] * c[h] * ev.curvature[cell];
                rsum += c[h] * ev.resid[cell];
            }
            gn[(j, j)] += wsum * u1[jp] * u1[jp];
            gn[(jp, jp)] += wsum * u1[j] * u1[j];
            gn[(j, jp)] += wsum * u1[j] * u1[jp];
            gn[(jp, j)] += wsum * u1[j] * u1[jp];
            extra[(j, jp)] -= rsum;
            extra[(jp, j)] -= rsum;
        }
        gn *= w * w / nf;
        extra *= w / nf;
        gn + extra
    }

    /// Hessian of ℓ in `u3_r` (exact: η is linear in `u3_r`).
    pub fn u3_hessian(&self, ev: &Evaluation, w: f64, u1: &[f64]) -> DMatrix<f64> {
        let mut per_time = vec![0.0; self.t];
        for (q, &(j, jp)) in self.pairs.iter().enumerate() {
            let uu = u1[j] * u1[jp];
            let uu2 = uu * uu;
            if uu2 == 0.0 {
                continue;
            }
            for (h, v) in per_time.iter_mut().enumerate() {
                *v += uu2 * ev.curvature[q * self.t + h];
            }
        }
        let mut hm = DMatrix::zeros(self.k, self.k);
        for (h, s) in per_time.iter().enumerate() {
            let row = self.phi_row(h);
            for a in 0..self.k {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 0..self.k {
                    hm[(a, b)] += s * row[a] * row[b];
                }
            }
        }
        hm * (w * w / self.n_subjects as f64)
    }
}

fn max_eigenvalue(m: DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max)
}
