//! Proximal gradient over the slope tensor with group soft-thresholding.

use crate::glm::penalty;
use crate::problem::Problem;
use crate::tensor::Tensor4;

use super::StepSize;

/// Scales every tube fiber by `(1 − τ/‖fiber‖)₊`.
pub fn group_shrink(g: &Tensor4, tau: f64) -> Tensor4 {
    let mut out = g.clone();
    group_shrink_in_place(&mut out, tau);
    out
}

pub(crate) fn group_shrink_in_place(g: &mut Tensor4, tau: f64) {
    if tau <= 0.0 {
        return;
    }
    let n = g.n();
    let k = g.basis_dim();
    let p = g.covariates();
    let data = g.as_mut_slice();
    let mut fiber = vec![0.0; k];
    for j in 0..n {
        for jp in 0..n {
            let base = (j * n + jp) * k * p;
            for l in 0..p {
                for (kk, v) in fiber.iter_mut().enumerate() {
                    *v = data[base + kk * p + l];
                }
                let norm = fiber.iter().map(|v| v * v).sum::<f64>().sqrt();
                // `v·(‖v‖−τ)/‖v‖` rounds once per entry, so exact inputs stay exact.
                let kept = if norm <= tau { 0.0 } else { norm - tau };
                for kk in 0..k {
                    let v = &mut data[base + kk * p + l];
                    *v = if kept == 0.0 { 0.0 } else { *v * kept / norm };
                }
            }
        }
    }
}

/// FISTA momentum recurrence `h ← (1 + √(1 + 4h²)) / 2`.
pub fn next_momentum(h: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * h * h).sqrt()) / 2.0
}

#[derive(Debug, Clone)]
pub struct FistaOutcome {
    pub gamma: Tensor4,
    /// Penalized objective at `gamma`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Step size in use when the loop ended.
    pub step: f64,
}

fn frob_dot(a: &Tensor4, b: &Tensor4) -> f64 {
    crate::tensor::dot(a.as_slice(), b.as_slice())
}

fn axpy(y: &Tensor4, alpha: f64, x: &Tensor4) -> Tensor4 {
    let mut out = y.clone();
    for (o, v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *o += alpha * v;
    }
    out
}

/// `1/L` from the curvature bound of the family and the spectra of the
/// basis and covariate Gram matrices. Families without a global bound use
/// the largest curvature at `gamma`; backtracking repairs underestimates.
pub(crate) fn auto_step(problem: &Problem, base: &[f64], gamma: &Tensor4) -> f64 {
    let curv = problem.family().curvature_bound().unwrap_or_else(|| {
        let (slope, active) = problem.slope_predictor(gamma);
        let ev = problem.evaluate(base, &slope, &active, true);
        let nf = problem.n_subjects() as f64;
        ev.curvature.iter().fold(0.0f64, |m, c| m.max(c / nf)) * 2.0
    });
    let lip = curv * problem.phi_gram_max_eig() * problem.x_gram_max_eig() / 2.0;
    if lip > 0.0 && lip.is_finite() {
        1.0 / lip
    } else {
        1.0
    }
}

/// Minimizes `ℓ(base, Γ) + λ·penalty(Γ)` over Γ with the baseline held fixed.
///
/// The returned iterate is the best one seen, so the objective never exceeds
/// its value at `start`.
pub fn fista_gamma(
    problem: &Problem,
    base: &[f64],
    start: &Tensor4,
    lambda: f64,
    step: StepSize,
    max_iters: usize,
    tol: f64,
) -> FistaOutcome {
    let objective = |g: &Tensor4| -> (f64, f64) {
        let (slope, active) = problem.slope_predictor(g);
        let l = problem.value(base, &slope, &active);
        (l, l + lambda * penalty(g))
    };
    let (_, f0) = objective(start);
    if problem.n_covariates() == 0 {
        return FistaOutcome {
            gamma: start.clone(),
            objective: f0,
            iterations: 0,
            converged: true,
            step: 0.0,
        };
    }
    let mut step = match step {
        StepSize::Fixed(s) => s,
        StepSize::Auto => auto_step(problem, base, start),
    };

    let mut best = (f0, start.clone());
    let mut x_prev = start.clone();
    let mut y = start.clone();
    let mut h = 1.0;
    let mut f_prev = f0;
    let mut ups = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let (slope, active) = problem.slope_predictor(&y);
        let ev = problem.evaluate(base, &slope, &active, false);
        let fy = ev.value;
        let grad = problem.gamma_gradient(&ev);

        let mut halvings = 0;
        let (cand, f_cand) = loop {
            let mut cand = axpy(&y, -step, &grad);
            group_shrink_in_place(&mut cand, lambda * step);
            let (l_cand, f_cand) = objective(&cand);
            let diff = axpy(&cand, -1.0, &y);
            let bound = fy + frob_dot(&grad, &diff) + frob_dot(&diff, &diff) / (2.0 * step);
            if l_cand.is_finite() && l_cand <= bound + 1e-12 * fy.abs().max(1.0) {
                break (cand, f_cand);
            }
            step /= 2.0;
            halvings += 1;
            if halvings > 60 {
                break (cand, f64::INFINITY);
            }
        };
        if !f_cand.is_finite() {
            log::warn!("FISTA: no admissible step after {halvings} halvings; stopping");
            break;
        }

        let h_next = next_momentum(h);
        let momentum = (h - 1.0) / h_next;
        let delta = axpy(&cand, -1.0, &x_prev);
        y = axpy(&cand, momentum, &delta);
        x_prev = cand;
        h = h_next;

        if f_cand < best.0 {
            best = (f_cand, x_prev.clone());
        }
        ups = if f_cand > f_prev { ups + 1 } else { 0 };
        if ups >= 5 {
            log::debug!("FISTA: objective rose 5 times in a row; halving step and restarting momentum");
            step /= 2.0;
            h = 1.0;
            x_prev = best.1.clone();
            y = best.1.clone();
            ups = 0;
        }
        let rel = (f_prev - f_cand).abs() / f_prev.abs().max(1.0);
        f_prev = f_cand;
        if rel < tol {
            converged = true;
            break;
        }
    }

    FistaOutcome {
        gamma: best.1,
        objective: best.0,
        iterations,
        converged,
        step,
    }
}
