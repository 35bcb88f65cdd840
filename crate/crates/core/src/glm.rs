//! Model parameters, the linear predictor, the negative log-likelihood, the
//! group penalty and their gradients, at dataset level.
//!
//! These functions rebuild a [`Problem`] on every call; estimators hold one
//! `Problem` and work with it directly.

use nalgebra::{DMatrix, DVector};

use crate::dataset::DynamicNetworkDataset;
use crate::error::{shape_err, Result};
use crate::family::Family;
use crate::problem::Problem;
use crate::spline::SplineBasis;
use crate::tensor::{cp_reconstruct, mode3_product, CpFactors, Tensor3, Tensor4};

/// Baseline CP factors plus the slope tensor Γ = (B_1, …, B_p).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub baseline: CpFactors,
    pub slopes: Tensor4,
}

impl ModelParams {
    pub fn zeros(n: usize, k: usize, p: usize, rank: usize) -> Self {
        Self {
            baseline: CpFactors::zeros(n, k, rank),
            slopes: Tensor4::zeros(n, k, p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.baseline.validate()?;
        let [n, _, k, _] = self.slopes.dims();
        if n != self.baseline.n() || k != self.baseline.basis_dim() {
            return shape_err(format!(
                "slopes {:?} disagree with baseline (n={}, K={})",
                self.slopes.dims(),
                self.baseline.n(),
                self.baseline.basis_dim()
            ));
        }
        if !self.slopes.is_symmetric() {
            return shape_err("slope slices are not symmetric");
        }
        Ok(())
    }

    pub fn baseline_tensor(&self) -> Tensor3 {
        cp_reconstruct(&self.baseline)
    }
}

/// `η = B0 ×₃ φ(t) + Σ_l x_l (B_l ×₃ φ(t))` for one subject at one time.
pub fn linear_predictor(params: &ModelParams, x: &[f64], phi_t: &[f64]) -> Result<DMatrix<f64>> {
    let p = params.slopes.covariates();
    if x.len() != p {
        return shape_err(format!("{} covariates given, model has {p}", x.len()));
    }
    let mut eta = mode3_product(&params.baseline_tensor(), phi_t)?;
    for (l, xl) in x.iter().enumerate() {
        if *xl == 0.0 {
            continue;
        }
        eta += mode3_product(&params.slopes.slice(l), phi_t)? * *xl;
    }
    Ok(eta)
}

/// Negative log-likelihood, up to a constant, averaged over subjects.
pub fn neg_loglik(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
) -> Result<f64> {
    let problem = Problem::new(data, family, basis)?;
    let pred = problem.predictor(&params.baseline, &params.slopes)?;
    Ok(problem.value(&pred.base, &pred.slope, &pred.active))
}

/// Group-lasso penalty `Σ_l Σ_{j≠j'} ‖Γ[j, j', ·, l]‖₂` (ordered pairs).
pub fn penalty(g: &Tensor4) -> f64 {
    let n = g.n();
    let mut s = 0.0;
    for l in 0..g.covariates() {
        for j in 0..n {
            for jp in 0..n {
                if j != jp {
                    s += g.fiber_norm(j, jp, l);
                }
            }
        }
    }
    s
}

/// `ℓ + λ · penalty`.
pub fn penalized_objective(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
    lambda: f64,
) -> Result<f64> {
    Ok(neg_loglik(params, data, family, basis)? + lambda * penalty(&params.slopes))
}

fn evaluated(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
) -> Result<(Problem, crate::problem::Evaluation)> {
    let problem = Problem::new(data, family, basis)?;
    let pred = problem.predictor(&params.baseline, &params.slopes)?;
    let ev = problem.evaluate(&pred.base, &pred.slope, &pred.active, false);
    Ok((problem, ev))
}

fn check_component(params: &ModelParams, r: usize) -> Result<()> {
    if r >= params.baseline.rank() {
        return shape_err(format!(
            "component {r} out of range for rank {}",
            params.baseline.rank()
        ));
    }
    Ok(())
}

/// `∂ℓ/∂u1_r`.
pub fn grad_u1r(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
    r: usize,
) -> Result<DVector<f64>> {
    check_component(params, r)?;
    let (problem, ev) = evaluated(params, data, family, basis)?;
    let f = &params.baseline;
    let u1: Vec<f64> = f.u1.column(r).iter().copied().collect();
    let u3: Vec<f64> = f.u3.column(r).iter().copied().collect();
    Ok(problem.u1_gradient(&ev, f.w[r], &u1, &u3))
}

/// `∂ℓ/∂u3_r`.
pub fn grad_u3r(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
    r: usize,
) -> Result<DVector<f64>> {
    check_component(params, r)?;
    let (problem, ev) = evaluated(params, data, family, basis)?;
    let f = &params.baseline;
    let u1: Vec<f64> = f.u1.column(r).iter().copied().collect();
    Ok(problem.u3_gradient(&ev, f.w[r], &u1))
}

/// `∂ℓ/∂Γ`. The likelihood sees each slice through its symmetric part, so
/// mirrored entries each receive half of the unordered-pair derivative.
pub fn grad_gamma(
    params: &ModelParams,
    data: &DynamicNetworkDataset,
    family: Family,
    basis: &SplineBasis,
) -> Result<Tensor4> {
    let (problem, ev) = evaluated(params, data, family, basis)?;
    Ok(problem.gamma_gradient(&ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_dataset, random_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FAMILIES: [Family; 3] = [
        Family::BernoulliLogit,
        Family::GaussianIdentity,
        Family::PoissonLog,
    ];

    /// Literal triple sum over subjects, pairs j<j' and time points.
    fn naive_neg_loglik(
        params: &ModelParams,
        data: &DynamicNetworkDataset,
        family: Family,
        basis: &SplineBasis,
    ) -> f64 {
        let n = data.n_nodes();
        let mut total = 0.0;
        for i in 0..data.n_subjects() {
            let x: Vec<f64> = data.covariates().row(i).iter().copied().collect();
            for (h, t) in data.time_grid().iter().enumerate() {
                let phi = basis.eval(*t).unwrap();
                let eta = linear_predictor(params, &x, &phi).unwrap();
                for j in 0..n {
                    for jp in (j + 1)..n {
                        let e = eta[(j, jp)];
                        total += data.edge(i, h, j, jp) * e - family.cumulant(e);
                    }
                }
            }
        }
        -total / data.n_subjects() as f64
    }

    #[test]
    fn bernoulli_zero_params_gives_log2_per_cell() {
        let data = random_dataset(Family::BernoulliLogit, 1, 5, 2, 7, 2);
        let basis = SplineBasis::cubic(4).unwrap();
        let params = ModelParams::zeros(5, 4, 2, 1);
        let l = neg_loglik(&params, &data, Family::BernoulliLogit, &basis).unwrap();
        let expected = 10.0 * 7.0 * std::f64::consts::LN_2;
        assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
    }

    #[test]
    fn scalar_case_by_hand() {
        use crate::dataset::Adjacency;
        let basis = SplineBasis::new(1, 0).unwrap();
        let data = DynamicNetworkDataset::new(
            Family::BernoulliLogit,
            2,
            vec![0.5],
            Adjacency::U8(vec![0, 1, 1, 0]),
            DMatrix::zeros(1, 0),
        )
        .unwrap();
        for eta0 in [-1.0f64, 0.0, 1.0] {
            // B0 = w u∘u∘v with u = e1/e2 mix: pick u = (1,1)/√2, v = 1, w = 2η₀.
            let s = std::f64::consts::FRAC_1_SQRT_2;
            let f = CpFactors::new(
                vec![2.0 * eta0.abs()],
                DMatrix::from_row_slice(2, 1, &[s, s]),
                DMatrix::from_row_slice(1, 1, &[eta0.signum().max(0.0) * 2.0 - 1.0]),
            )
            .unwrap();
            let params = ModelParams {
                baseline: f,
                slopes: Tensor4::zeros(2, 1, 0),
            };
            let l = neg_loglik(&params, &data, Family::BernoulliLogit, &basis).unwrap();
            let expected = -eta0 + (1.0 + eta0.exp()).ln();
            assert!((l - expected).abs() < 1e-12, "η₀={eta0}: {l} vs {expected}");
        }
    }

    #[test]
    fn matches_naive_triple_sum_for_all_families() {
        for (s, family) in FAMILIES.iter().enumerate() {
            let data = random_dataset(*family, 4, 5, 2, 6, 2 + s as u64);
            let basis = SplineBasis::cubic(4).unwrap();
            let params = random_params(5, 4, 2, 2, 30 + s as u64, 0.3);
            let fast = neg_loglik(&params, &data, *family, &basis).unwrap();
            let slow = naive_neg_loglik(&params, &data, *family, &basis);
            assert!((fast - slow).abs() < 1e-10 * (1.0 + slow.abs()), "{family}: {fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_to_subject_relabeling() {
        let data = random_dataset(Family::BernoulliLogit, 6, 4, 3, 5, 8);
        let basis = SplineBasis::cubic(4).unwrap();
        let params = random_params(4, 4, 3, 1, 9, 0.4);
        let a = neg_loglik(&params, &data, Family::BernoulliLogit, &basis).unwrap();
        let perm = data.subset(&[3, 1, 5, 0, 2, 4]).unwrap();
        let b = neg_loglik(&params, &perm, Family::BernoulliLogit, &basis).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_family_mismatch() {
        let data = random_dataset(Family::GaussianIdentity, 3, 4, 2, 4, 1);
        let basis = SplineBasis::cubic(4).unwrap();
        let params = ModelParams::zeros(4, 4, 2, 1);
        assert!(neg_loglik(&params, &data, Family::BernoulliLogit, &basis).is_err());
    }

    #[test]
    fn penalty_cases() {
        assert_eq!(penalty(&Tensor4::zeros(3, 2, 2)), 0.0);
        let mut g = Tensor4::zeros(3, 2, 1);
        g.set_fiber(0, 1, 0, &[3.0, 4.0]);
        g.set_fiber(1, 0, 0, &[3.0, 4.0]);
        assert_eq!(penalty(&g), 10.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 4 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor4::from_vec(4, 3, 2, data).unwrap();
        let norms = crate::tensor::fiber_group_norms(&g);
        let oracle: f64 = norms
            .iter()
            .map(|m| {
                let mut s = 0.0;
                for j in 0..4 {
                    for jp in 0..4 {
                        if j != jp {
                            s += m[(j, jp)];
                        }
                    }
                }
                s
            })
            .sum();
        assert!((penalty(&g) - oracle).abs() < 1e-12);
    }

    #[test]
    fn linear_predictor_cases() {
        let params = ModelParams::zeros(3, 4, 2, 1);
        let eta = linear_predictor(&params, &[0.3, -1.0], &[0.25; 4]).unwrap();
        assert!(eta.iter().all(|v| *v == 0.0));

        // p = 0 reduces to the baseline term.
        let mut params = random_params(3, 2, 0, 1, 4, 0.0);
        let phi = [0.3, 0.7];
        let eta = linear_predictor(&params, &[], &phi).unwrap();
        let b0 = params.baseline_tensor();
        assert_eq!(eta, mode3_product(&b0, &phi).unwrap());

        // Form assembling B_l(t) = Σ_k φ_k(t) B_l[·,·,k] explicitly.
        params = random_params(3, 2, 1, 1, 5, 0.8);
        let x = [1.7];
        let eta = linear_predictor(&params, &x, &phi).unwrap();
        for j in 0..3 {
            for jp in 0..3 {
                let mut e = 0.0;
                for k in 0..2 {
                    e += phi[k] * b0_entry(&params, j, jp, k);
                    e += x[0] * phi[k] * params.slopes.get(j, jp, k, 0);
                }
                assert!((eta[(j, jp)] - e).abs() < 1e-12);
            }
        }
    }

    fn b0_entry(params: &ModelParams, j: usize, jp: usize, k: usize) -> f64 {
        let f = &params.baseline;
        (0..f.rank())
            .map(|r| f.w[r] * f.u1[(j, r)] * f.u1[(jp, r)] * f.u3[(k, r)])
            .sum()
    }

    #[test]
    fn linear_predictor_is_affine_in_covariates() {
        let params = random_params(4, 3, 2, 2, 6, 0.5);
        let phi = [0.2, 0.5, 0.3];
        let x1 = [0.4, -1.1];
        let x2 = [2.0, 0.3];
        let x12 = [2.4, -0.8];
        let e = |x: &[f64]| linear_predictor(&params, x, &phi).unwrap();
        let d = e(&x12) - e(&x1) - e(&x2) + e(&[0.0, 0.0]);
        assert!(d.iter().all(|v| v.abs() < 1e-10));
    }

    fn fd_check(family: Family, seed: u64) {
        let (n, k, p, rank, nsub, t) = (6, 4, 2, 2, 5, 10);
        let data = random_dataset(family, nsub, n, p, t, seed);
        let basis = SplineBasis::cubic(k).unwrap();
        let scale = if family == Family::PoissonLog { 0.2 } else { 0.5 };
        let params = random_params(n, k, p, rank, seed + 100, scale);
        let f = |pp: &ModelParams| neg_loglik(pp, &data, family, &basis).unwrap();
        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut rel = |analytic: f64, numeric: f64| {
            let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(e);
        };

        for r in 0..rank {
            let g1 = grad_u1r(&params, &data, family, &basis, r).unwrap();
            for a in 0..n {
                let mut plus = params.clone();
                plus.baseline.u1[(a, r)] += step;
                let mut minus = params.clone();
                minus.baseline.u1[(a, r)] -= step;
                rel(g1[a], (f(&plus) - f(&minus)) / (2.0 * step));
            }
            let g3 = grad_u3r(&params, &data, family, &basis, r).unwrap();
            for a in 0..k {
                let mut plus = params.clone();
                plus.baseline.u3[(a, r)] += step;
                let mut minus = params.clone();
                minus.baseline.u3[(a, r)] -= step;
                rel(g3[a], (f(&plus) - f(&minus)) / (2.0 * step));
            }
        }
        let gg = grad_gamma(&params, &data, family, &basis).unwrap();
        for j in 0..n {
            for jp in 0..n {
                for kk in 0..k {
                    for l in 0..p {
                        let mut plus = params.clone();
                        let v = plus.slopes.get(j, jp, kk, l);
                        plus.slopes.set(j, jp, kk, l, v + step);
                        let mut minus = params.clone();
                        minus.slopes.set(j, jp, kk, l, v - step);
                        rel(gg.get(j, jp, kk, l), (f(&plus) - f(&minus)) / (2.0 * step));
                    }
                }
            }
        }
        assert!(worst < 1e-6, "{family}: worst relative error {worst:e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (s, family) in FAMILIES.iter().enumerate() {
            fd_check(*family, 40 + s as u64);
        }
    }

    #[test]
    fn zero_covariate_column_has_zero_gamma_gradient() {
        use crate::dataset::Adjacency;
        let base = random_dataset(Family::BernoulliLogit, 5, 4, 2, 3, 12);
        let mut x = base.covariates().clone();
        x.column_mut(1).fill(0.0);
        let adj = match base.adjacency() {
            Adjacency::U8(v) => Adjacency::U8(v.clone()),
            Adjacency::F64(v) => Adjacency::F64(v.clone()),
        };
        let data = DynamicNetworkDataset::new(
            Family::BernoulliLogit,
            4,
            base.time_grid().to_vec(),
            adj,
            x,
        )
        .unwrap();
        let basis = SplineBasis::cubic(4).unwrap();
        let params = random_params(4, 4, 2, 1, 13, 0.5);
        let g = grad_gamma(&params, &data, Family::BernoulliLogit, &basis).unwrap();
        assert!(g.slice(1).as_slice().iter().all(|v| *v == 0.0));
        assert!(g.slice(0).as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gradients_vanish_at_noiseless_gaussian_optimum() {
        let basis = SplineBasis::cubic(4).unwrap();
        let params = random_params(5, 4, 1, 2, 14, 0.5);
        let data = crate::testutil::noiseless_gaussian(&params, &basis, 6, 8, 15);
        for r in 0..2 {
            let g1 = grad_u1r(&params, &data, Family::GaussianIdentity, &basis, r).unwrap();
            let g3 = grad_u3r(&params, &data, Family::GaussianIdentity, &basis, r).unwrap();
            assert!(g1.amax() < 1e-10 && g3.amax() < 1e-10);
        }
        let gg = grad_gamma(&params, &data, Family::GaussianIdentity, &basis).unwrap();
        assert!(gg.as_slice().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn convex_in_gamma() {
        let data = random_dataset(Family::BernoulliLogit, 6, 4, 2, 5, 16);
        let basis = SplineBasis::cubic(4).unwrap();
        let p1 = random_params(4, 4, 2, 1, 17, 0.8);
        let mut p2 = random_params(4, 4, 2, 1, 18, 0.8);
        p2.baseline = p1.baseline.clone();
        let f = |pp: &ModelParams| neg_loglik(pp, &data, Family::BernoulliLogit, &basis).unwrap();
        for lam in [0.1, 0.5, 0.9] {
            let mut mix = p1.clone();
            let data_mix: Vec<f64> = p1
                .slopes
                .as_slice()
                .iter()
                .zip(p2.slopes.as_slice())
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect();
            mix.slopes = Tensor4::from_vec(4, 4, 2, data_mix).unwrap();
            assert!(f(&mix) <= lam * f(&p1) + (1.0 - lam) * f(&p2) + 1e-10);
        }
    }
}
