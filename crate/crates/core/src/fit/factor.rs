//! Block updates of single CP factors and the Norm/Unit rescaling.

use nalgebra::{DMatrix, DVector};

use crate::problem::Problem;
use crate::tensor::{CpFactors, Tensor4};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

/// Weights below this are frozen at zero.
pub const FROZEN_WEIGHT: f64 = 1e-12;

/// Local model handed to the Newton driver.
struct Local {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FactorUpdate {
    pub vector: DVector<f64>,
    pub before: f64,
    pub after: f64,
    pub iterations: usize,
}

fn newton_direction(grad: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        let d = -ch.solve(grad);
        if d.iter().all(|v| v.is_finite()) {
            return Some(d);
        }
    }
    // Indefinite: flip negative curvature and floor tiny eigenvalues.
    let eig = h.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !(top > 0.0 && top.is_finite()) {
        return None;
    }
    let floor = 1e-8 * top;
    let coords = eig.eigenvectors.transpose() * grad;
    let scaled = DVector::from_iterator(
        coords.len(),
        coords.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| -c / l.abs().max(floor)),
    );
    let d = &eig.eigenvectors * scaled;
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Damped Newton with Armijo backtracking. Every accepted step strictly
/// lowers the objective; when no step is accepted the input is returned.
fn damped_newton(
    x0: DVector<f64>,
    max_iters: usize,
    mut local: impl FnMut(&DVector<f64>) -> Local,
    mut value: impl FnMut(&DVector<f64>) -> f64,
) -> FactorUpdate {
    let mut x = x0;
    let mut loc = local(&x);
    let before = loc.value;
    let mut iterations = 0;
    while iterations < max_iters {
        let f = loc.value;
        let Some(d) = newton_direction(&loc.grad, &loc.hess) else {
            break;
        };
        let slope = loc.grad.dot(&d);
        if !(slope < -1e-15 * f.abs().max(1.0)) {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &x + &d * alpha;
            let fc = value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO_C * alpha * slope && fc < f {
                accepted = Some(cand);
                break;
            }
            alpha /= 2.0;
        }
        let Some(cand) = accepted else {
            break;
        };
        iterations += 1;
        x = cand;
        loc = local(&x);
        if (f - loc.value) <= 1e-15 * f.abs().max(1.0) {
            break;
        }
    }
    FactorUpdate {
        vector: x,
        before,
        after: loc.value,
        iterations,
    }
}

fn column(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.column(r).iter().copied().collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Minimizes the likelihood over `u1_r` with everything else fixed. The
/// returned vector need not have unit length; see [`renormalize`].
pub fn update_factor_u1r(
    problem: &Problem,
    factors: &CpFactors,
    gamma: &Tensor4,
    r: usize,
    max_iters: usize,
) -> FactorUpdate {
    let (slope, active) = problem.slope_predictor(gamma);
    let other = problem.base_predictor_without(factors, Some(r));
    let w = factors.w[r];
    let u3 = column(&factors.u3, r);
    let base_at = |u: &DVector<f64>| add(&other, &problem.component_predictor(w, u.as_slice(), &u3));
    damped_newton(
        DVector::from_vec(column(&factors.u1, r)),
        max_iters,
        |u| {
            let ev = problem.evaluate(&base_at(u), &slope, &active, true);
            let grad = problem.u1_gradient(&ev, w, u.as_slice(), &u3);
            let hess = problem.u1_hessian(&ev, w, u.as_slice(), &u3);
            Local {
                value: ev.value,
                grad,
                hess,
            }
        },
        |u| problem.value(&base_at(u), &slope, &active),
    )
}

/// Minimizes the likelihood over `u3_r` with everything else fixed. The
/// problem is a GLM in `u3_r`, so the Hessian is exact.
pub fn update_factor_u3r(
    problem: &Problem,
    factors: &CpFactors,
    gamma: &Tensor4,
    r: usize,
    max_iters: usize,
) -> FactorUpdate {
    let (slope, active) = problem.slope_predictor(gamma);
    let other = problem.base_predictor_without(factors, Some(r));
    let w = factors.w[r];
    let u1 = column(&factors.u1, r);
    let base_at = |v: &DVector<f64>| add(&other, &problem.component_predictor(w, &u1, v.as_slice()));
    damped_newton(
        DVector::from_vec(column(&factors.u3, r)),
        max_iters,
        |v| {
            let ev = problem.evaluate(&base_at(v), &slope, &active, true);
            let grad = problem.u3_gradient(&ev, w, &u1);
            let hess = problem.u3_hessian(&ev, w, &u1);
            Local {
                value: ev.value,
                grad,
                hess,
            }
        },
        |v| problem.value(&base_at(v), &slope, &active),
    )
}

/// `w_r ← w_r ‖ũ1_r‖² ‖ũ3_r‖` and unit columns; leaves the reconstruction
/// unchanged. Zero columns and tiny weights freeze the component at zero.
/// Returns the indices that were frozen by this call.
pub fn renormalize(factors: &mut CpFactors) -> Vec<usize> {
    let n = factors.n();
    let k = factors.basis_dim();
    let mut frozen = Vec::new();
    for r in 0..factors.rank() {
        if factors.w[r] == 0.0 {
            continue;
        }
        let a = factors.u1.column(r).norm();
        let b = factors.u3.column(r).norm();
        let w = factors.w[r] * a * a * b;
        if a == 0.0 || b == 0.0 || !(w >= FROZEN_WEIGHT) || !w.is_finite() {
            if a == 0.0 || b == 0.0 {
                log::warn!("component {r} collapsed to a zero column; freezing it");
            } else {
                log::debug!("component {r} weight {w:e} below threshold; freezing it");
            }
            factors.w[r] = 0.0;
            factors.u1.column_mut(r).fill(0.0);
            factors.u1[(r % n, r)] = 1.0;
            factors.u3.column_mut(r).fill(0.0);
            factors.u3[(r % k, r)] = 1.0;
            frozen.push(r);
            continue;
        }
        factors.w[r] = w;
        factors.u1.column_mut(r).unscale_mut(a);
        factors.u3.column_mut(r).unscale_mut(b);
    }
    frozen
}
