//! Symmetric CP decomposition by tied-mode alternating least squares.
//!
//! The model is `T ≈ Σ_r a_r ∘ a_r ∘ v_r`; the first two modes share the
//! matrix `A` and the weights are absorbed into `V` until the final
//! normalization.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensor::{cp_reconstruct, CpFactors, Tensor3};

const RANDOM_RESTARTS: usize = 3;
const RESTART_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone)]
pub struct CpDecomposition {
    pub factors: CpFactors,
    /// `‖T − reconstruct(factors)‖_F`.
    pub error: f64,
    /// `error / ‖T‖_F`, or `error` itself when `T` is zero.
    pub relative_error: f64,
    pub sweeps: usize,
    /// Reconstruction error after each sweep of the winning start.
    pub error_trace: Vec<f64>,
}

/// Fits rank-`rank` symmetric CP factors to `t`.
///
/// Several deterministic starts are tried (a spectral start plus seeded
/// random ones) and the lowest-error result is kept.
pub fn cp_decompose(t: &Tensor3, rank: usize, max_sweeps: usize, tol: f64) -> Result<CpDecomposition> {
    let [n1, n2, k] = t.dims();
    if n1 != n2 {
        return invalid(format!("CP input must be square in modes 1-2, got {n1}x{n2}"));
    }
    let scale = t.frobenius_norm();
    if t.max_asymmetry() > 1e-12 * scale.max(1.0) {
        return invalid(format!(
            "CP input is not symmetric in modes 1-2 (max asymmetry {:e})",
            t.max_asymmetry()
        ));
    }
    if rank == 0 || rank > n1 || rank > k {
        return invalid(format!("rank {rank} must lie in 1..=min(n={n1}, K={k})"));
    }
    if max_sweeps == 0 {
        return invalid("max_sweeps must be at least 1");
    }

    if scale == 0.0 {
        return Ok(CpDecomposition {
            factors: CpFactors::zeros(n1, k, rank),
            error: 0.0,
            relative_error: 0.0,
            sweeps: 0,
            error_trace: vec![0.0],
        });
    }

    let mut starts = vec![spectral_start(t, rank)];
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    for _ in 0..RANDOM_RESTARTS {
        starts.push(DMatrix::from_fn(n1, rank, |_, _| rng.sample(StandardNormal)));
    }

    let mut best: Option<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> = None;
    for a0 in starts {
        let (a, v, trace) = tied_als(t, a0, max_sweeps, tol);
        let err = *trace.last().unwrap();
        let better = match &best {
            None => true,
            Some((_, _, bt)) => err < *bt.last().unwrap(),
        };
        if better {
            best = Some((a, v, trace));
        }
        if err <= 1e-13 * scale {
            break;
        }
    }
    let (a, v, trace) = best.expect("at least one start");
    let factors = normalize_factors(&a, &v);
    let error = cp_reconstruct(&factors).distance(t)?;
    Ok(CpDecomposition {
        factors,
        error,
        relative_error: error / scale,
        sweeps: trace.len() - 1,
        error_trace: trace,
    })
}

/// Like [`cp_decompose`], but the diagonal fibers `T[j, j, :]` are treated
/// as missing. They are refilled from the running reconstruction between
/// ALS sweeps; errors are measured over the off-diagonal fibers only.
pub fn cp_decompose_offdiagonal(
    t: &Tensor3,
    rank: usize,
    max_sweeps: usize,
    tol: f64,
) -> Result<CpDecomposition> {
    let first = cp_decompose(t, rank, max_sweeps, tol)?;
    let n = t.dims()[0];
    let off_norm = offdiagonal_distance(t, None);
    if off_norm == 0.0 {
        return Ok(first);
    }
    let f = &first.factors;
    let mut a = f.u1.clone();
    let mut v = DMatrix::from_fn(f.u3.nrows(), rank, |kk, r| f.u3[(kk, r)] * f.w[r]);
    let mut target = t.clone();
    let mut trace = vec![offdiagonal_distance(t, Some(&normalize_factors(&a, &v)))];
    for _ in 0..IMPUTE_SWEEPS {
        let recon = cp_reconstruct(&normalize_factors(&a, &v));
        let mut change = 0.0;
        for j in 0..n {
            for (x, &r) in target.fiber_mut(j, j).iter_mut().zip(recon.fiber(j, j)) {
                change += (*x - r) * (*x - r);
                *x = r;
            }
        }
        let (a2, v2, _) = tied_als(&target, a, 1, 0.0);
        a = a2;
        v = v2;
        let err = offdiagonal_distance(t, Some(&normalize_factors(&a, &v)));
        let prev = *trace.last().unwrap();
        trace.push(err);
        if change.sqrt() <= 1e-13 * off_norm || err <= 1e-14 * off_norm || (prev - err).abs() <= tol * 1e-3 * prev {
            break;
        }
    }
    let factors = normalize_factors(&a, &v);
    let error = *trace.last().unwrap();
    Ok(CpDecomposition {
        factors,
        error,
        relative_error: error / off_norm,
        sweeps: first.sweeps + trace.len() - 1,
        error_trace: trace,
    })
}

const IMPUTE_SWEEPS: usize = 20_000;

/// Off-diagonal Frobenius distance between `t` and the reconstruction of
/// `f` (or the off-diagonal norm of `t` when `f` is `None`).
fn offdiagonal_distance(t: &Tensor3, f: Option<&CpFactors>) -> f64 {
    let [n, _, k] = t.dims();
    let recon = f.map(cp_reconstruct);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for kk in 0..k {
                let d = t.get(i, j, kk) - recon.as_ref().map_or(0.0, |r| r.get(i, j, kk));
                sum += d * d;
            }
        }
    }
    sum.sqrt()
}

/// Top-`rank` eigenvectors of `Σ_k T_k T_k`, scaled by their eigenvalue's fourth root.
fn spectral_start(t: &Tensor3, rank: usize) -> DMatrix<f64> {
    let [n, _, k] = t.dims();
    let mut gram = DMatrix::zeros(n, n);
    for kk in 0..k {
        let s = t.frontal_slice(kk);
        gram += &s * &s;
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(n, rank, |i, r| {
        let idx = order[r];
        eig.eigenvectors[(i, idx)] * eig.eigenvalues[idx].max(0.0).powf(0.25).max(1e-8)
    })
}

fn model_error(t: &Tensor3, a: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let [n, _, k] = t.dims();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let fiber = t.fiber(i, j);
            for kk in 0..k {
                let mut m = 0.0;
                for r in 0..a.ncols() {
                    m += a[(i, r)] * a[(j, r)] * v[(kk, r)];
                }
                let d = fiber[kk] - m;
                s += d * d;
            }
        }
    }
    s.sqrt()
}

fn solve_gram(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    // rhs is rows × R; returns rhs · gram⁻¹ (gram symmetric).
    let rhs_t = rhs.transpose();
    let sol = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs_t),
        None => {
            let pinv = gram
                .clone()
                .pseudo_inverse(1e-12 * gram.norm().max(1e-300))
                .unwrap_or_else(|_| DMatrix::zeros(gram.nrows(), gram.ncols()));
            pinv * rhs_t
        }
    };
    sol.transpose()
}

fn update_v(t: &Tensor3, a: &DMatrix<f64>) -> DMatrix<f64> {
    let [n, _, k] = t.dims();
    let rank = a.ncols();
    let mut m3 = DMatrix::zeros(k, rank);
    for i in 0..n {
        for j in 0..n {
            let fiber = t.fiber(i, j);
            for r in 0..rank {
                let c = a[(i, r)] * a[(j, r)];
                for kk in 0..k {
                    m3[(kk, r)] += fiber[kk] * c;
                }
            }
        }
    }
    let ata = a.transpose() * a;
    let gram = ata.component_mul(&ata);
    solve_gram(&gram, &m3)
}

fn tied_a_candidate(t: &Tensor3, a: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let [n, _, k] = t.dims();
    let rank = a.ncols();
    let mut m1 = DMatrix::zeros(n, rank);
    for i in 0..n {
        for j in 0..n {
            let fiber = t.fiber(i, j);
            for r in 0..rank {
                let mut tv = 0.0;
                for kk in 0..k {
                    tv += fiber[kk] * v[(kk, r)];
                }
                m1[(i, r)] += tv * a[(j, r)];
            }
        }
    }
    let gram = (a.transpose() * a).component_mul(&(v.transpose() * v));
    solve_gram(&gram, &m1)
}

fn tied_als(
    t: &Tensor3,
    mut a: DMatrix<f64>,
    max_sweeps: usize,
    tol: f64,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let scale = t.frobenius_norm();
    let mut v = update_v(t, &a);
    let mut err = model_error(t, &a, &v);
    let mut trace = vec![err];
    for _ in 0..max_sweeps {
        let prev = err;

        // Tied update of A with a backtracking safeguard so each sweep never
        // increases the reconstruction error.
        let cand = tied_a_candidate(t, &a, &v);
        let mut step = 1.0;
        for _ in 0..30 {
            let trial = &a + (&cand - &a) * step;
            let e = model_error(t, &trial, &v);
            if e <= err {
                a = trial;
                err = e;
                break;
            }
            step *= 0.5;
        }

        // V is linear given A, so the exact least-squares solve cannot increase the error.
        let v_new = update_v(t, &a);
        let e = model_error(t, &a, &v_new);
        if e <= err {
            v = v_new;
            err = e;
        }
        trace.push(err);

        if err <= 1e-14 * scale || (prev - err) <= tol * prev {
            break;
        }
    }
    (a, v, trace)
}

fn normalize_factors(a: &DMatrix<f64>, v: &DMatrix<f64>) -> CpFactors {
    let n = a.nrows();
    let k = v.nrows();
    let rank = a.ncols();
    let mut comps: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(rank);
    for r in 0..rank {
        let an = a.column(r).norm();
        let vn = v.column(r).norm();
        let w = an * an * vn;
        if !(w.is_finite() && w > 0.0 && an > 0.0 && vn > 0.0) {
            comps.push((0.0, unit(n, r % n), unit(k, r % k)));
            continue;
        }
        let mut u1: Vec<f64> = a.column(r).iter().map(|x| x / an).collect();
        let u3: Vec<f64> = v.column(r).iter().map(|x| x / vn).collect();
        // u1 enters twice, so its sign is free: make the largest-magnitude entry positive.
        let pivot = u1
            .iter()
            .copied()
            .max_by(|x, y| x.abs().total_cmp(&y.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            u1.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push((w, u1, u3));
    }
    comps.sort_by(|x, y| y.0.total_cmp(&x.0));
    let w = comps.iter().map(|c| c.0).collect();
    let u1 = DMatrix::from_fn(n, rank, |i, r| comps[r].1[i]);
    let u3 = DMatrix::from_fn(k, rank, |i, r| comps[r].2[i]);
    let mut f = CpFactors { w, u1, u3 };
    renormalize_columns(&mut f);
    f
}

fn unit(len: usize, at: usize) -> Vec<f64> {
    let mut e = vec![0.0; len];
    e[at] = 1.0;
    e
}

/// Re-divides columns by their norms to remove rounding drift from unit length.
pub(crate) fn renormalize_columns(f: &mut CpFactors) {
    for m in [&mut f.u1, &mut f.u3] {
        for mut c in m.column_iter_mut() {
            let norm = c.norm();
            if norm > 0.0 {
                c /= norm;
            }
        }
    }
}

impl From<CpDecomposition> for CpFactors {
    fn from(d: CpDecomposition) -> Self {
        d.factors
    }
}
