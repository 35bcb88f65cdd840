//! Random instances shared by unit tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Adjacency, DynamicNetworkDataset};
use crate::family::Family;
use crate::glm::{linear_predictor, ModelParams};
use crate::spline::{equispaced_grid, SplineBasis};
use crate::tensor::{CpFactors, Tensor4};

pub(crate) fn random_factors(rng: &mut ChaCha8Rng, n: usize, k: usize, rank: usize) -> CpFactors {
    let mut u1 = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut u3 = DMatrix::from_fn(k, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = vec![0.0; rank];
    for r in 0..rank {
        let a = u1.column(r).norm();
        let b = u3.column(r).norm();
        w[r] = a * a * b;
        u1.column_mut(r).unscale_mut(a);
        u3.column_mut(r).unscale_mut(b);
    }
    CpFactors::new(w, u1, u3).unwrap()
}

/// Random parameters with moderate weights and symmetric slopes, about half
/// of whose fibers are zero.
pub(crate) fn random_params(n: usize, k: usize, p: usize, rank: usize, seed: u64, scale: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline = random_factors(&mut rng, n, k, rank);
    for w in baseline.w.iter_mut() {
        *w = 4.0 * scale.max(0.1) * rng.random_range(0.5..1.5);
    }
    let mut slopes = Tensor4::zeros(n, k, p);
    for l in 0..p {
        for j in 0..n {
            for jp in (j + 1)..n {
                if rng.random_bool(0.5) {
                    continue;
                }
                let fiber: Vec<f64> = (0..k).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                slopes.set_fiber(j, jp, l, &fiber);
                slopes.set_fiber(jp, j, l, &fiber);
            }
        }
    }
    ModelParams { baseline, slopes }
}

fn random_covariates(rng: &mut ChaCha8Rng, nsub: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nsub, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Edges drawn without reference to any model.
pub(crate) fn random_dataset(
    family: Family,
    nsub: usize,
    n: usize,
    p: usize,
    t: usize,
    seed: u64,
) -> DynamicNetworkDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_covariates(&mut rng, nsub, p);
    let mut vals = vec![0.0; nsub * t * n * n];
    for block in vals.chunks_mut(n * n) {
        for j in 0..n {
            for jp in (j + 1)..n {
                let v = match family {
                    Family::BernoulliLogit => f64::from(u8::from(rng.random_bool(0.5))),
                    Family::GaussianIdentity => rng.sample(StandardNormal),
                    Family::PoissonLog => f64::from(rng.random_range(0u8..4)),
                };
                block[j * n + jp] = v;
                block[jp * n + j] = v;
            }
        }
    }
    let adjacency = match family {
        Family::GaussianIdentity => Adjacency::F64(vals),
        _ => Adjacency::U8(vals.iter().map(|v| *v as u8).collect()),
    };
    DynamicNetworkDataset::new(family, n, equispaced_grid(t), adjacency, x).unwrap()
}

/// Gaussian data whose edges equal the linear predictor exactly.
pub(crate) fn noiseless_gaussian(
    params: &ModelParams,
    basis: &SplineBasis,
    nsub: usize,
    t: usize,
    seed: u64,
) -> DynamicNetworkDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.baseline.n();
    let p = params.slopes.covariates();
    let x = random_covariates(&mut rng, nsub, p);
    let grid = equispaced_grid(t);
    let mut vals = Vec::with_capacity(nsub * t * n * n);
    for i in 0..nsub {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for tt in &grid {
            let eta = linear_predictor(params, &xi, &basis.eval(*tt).unwrap()).unwrap();
            for j in 0..n {
                for jp in 0..n {
                    vals.push(if j == jp { 0.0 } else { eta[(j, jp)] });
                }
            }
        }
    }
    DynamicNetworkDataset::new(Family::GaussianIdentity, n, grid, Adjacency::F64(vals), x).unwrap()
}
